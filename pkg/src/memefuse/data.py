"""Dataset schemas, persistence, splits, and the synthetic meme-world generator.

The generator plants a cross-modal labeling rule (AND or XOR over a text
trigger and a visual concept) so that fusing modalities is provably
necessary: in XOR worlds each unimodal indicator alone is uninformative.
Every sample's planted indicators go to a provenance sidecar so tests can
re-derive labels without re-simulating.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InputError, IntegrityError, ParseError
from .numerics.rng import STREAM_SPLIT, STREAM_WORLD, RngState

RULE_AND = "and"
RULE_XOR = "xor"

# (text trigger, visual trigger) combinations satisfying each rule outcome
_RULE_COMBOS = {
    (RULE_AND, 1): [(1, 1)],
    (RULE_AND, 0): [(0, 0), (0, 1), (1, 0)],
    (RULE_XOR, 1): [(0, 1), (1, 0)],
    (RULE_XOR, 0): [(0, 0), (1, 1)],
}

DEFAULT_TRIGGER_WORDS = ["vexor", "drazk", "morgul"]
DEFAULT_BENIGN_WORDS = [
    "coffee", "monday", "holiday", "sofa", "weather", "pizza", "meeting",
    "homework", "traffic", "weekend", "sleep", "music", "garden", "library",
]
DEFAULT_SYNONYMS = {
    "coffee": ["espresso", "brew"],
    "holiday": ["vacation", "break"],
    "sofa": ["couch", "settee"],
    "pizza": ["flatbread", "pie"],
    "homework": ["assignment", "coursework"],
    "weekend": ["saturday", "sunday"],
    "sleep": ["nap", "rest"],
    "music": ["tunes", "melody"],
}
DEFAULT_TRIGGER_CONCEPT = "serpent"
DEFAULT_BENIGN_CONCEPTS = ["cat", "lamp", "tree", "car", "boat", "bird"]
DEFAULT_CAPTION_TEMPLATES = [
    "a photo of {a} and {b}",
    "an image showing {a} with {b}",
    "{a} beside {b} in the picture",
    "the scene contains {a} and {b}",
    "a view of {a} near {b}",
]


def eval_rule(rule: str, text_trigger: bool, visual_trigger: bool) -> int:
    if rule == RULE_AND:
        return int(text_trigger and visual_trigger)
    if rule == RULE_XOR:
        return int(bool(text_trigger) != bool(visual_trigger))
    raise InputError(f"unknown rule '{rule}'")


def text_has_trigger(text: str, trigger_words) -> bool:
    words = set(re.findall(r"[a-z0-9]+", text.lower()))
    return any(w in words for w in trigger_words)


# ---------------------------------------------------------------------------
# sample types
# ---------------------------------------------------------------------------

@dataclass
class RegionFeature:
    """One detected object: feature vector, normalized box, label, confidence."""

    feat: np.ndarray
    box: np.ndarray  # x1, y1, x2, y2
    label: str
    score: float

    def __post_init__(self):
        self.feat = np.asarray(self.feat, dtype=np.float64)
        self.box = np.asarray(self.box, dtype=np.float64)
        if self.box.shape != (4,):
            raise InputError(f"region box must have 4 values, got {self.box.shape}")
        x1, y1, x2, y2 = self.box
        if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
            raise InputError(f"region box {self.box.tolist()} is not a normalized box")
        if not (0.0 <= self.score <= 1.0):
            raise InputError(f"region score {self.score} outside [0, 1]")


@dataclass
class MemeSample:
    """One meme: OCR text, binary label, visual regions, optional caption."""

    id: str
    text: str
    label: int
    regions: list
    caption: str | None = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InputError(f"sample {self.id}: label must be 0 or 1, got {self.label}")


@dataclass
class CaptionSample:
    """Image-captioning training item: regions plus reference captions."""

    id: str
    regions: list
    references: list

    def __post_init__(self):
        if not self.references or any(not r for r in self.references):
            raise InputError(f"caption sample {self.id}: references must be nonempty")


@dataclass
class Provenance:
    """Planted indicators recorded at generation time."""

    id: str
    text_trigger: bool
    visual_trigger: bool
    noise_flipped: bool
    concepts: list
    rule: str


@dataclass
class WorldConfig:
    """Knobs of the synthetic meme world."""

    seed: int = 0
    n_samples: int = 1000
    rule: str = RULE_XOR
    d_o: int = 32
    n_regions: int = 10
    trigger_words: list = field(default_factory=lambda: list(DEFAULT_TRIGGER_WORDS))
    benign_words: list = field(default_factory=lambda: list(DEFAULT_BENIGN_WORDS))
    synonyms: dict = field(default_factory=lambda: dict(DEFAULT_SYNONYMS))
    trigger_concept: str = DEFAULT_TRIGGER_CONCEPT
    benign_concepts: list = field(default_factory=lambda: list(DEFAULT_BENIGN_CONCEPTS))
    prototype_spread: float = 0.5
    label_noise: float = 0.0
    train_hateful_fraction: float = 0.36
    dev_fraction: float = 0.05
    test_fraction: float = 0.10
    caption_templates: list = field(default_factory=lambda: list(DEFAULT_CAPTION_TEMPLATES))
    text_len_range: tuple = (4, 8)
    caption_only_visual: bool = False

    def __post_init__(self):
        overlap = set(self.trigger_words) & set(self.benign_words)
        if overlap:
            raise InputError(f"trigger and benign lexicons overlap: {sorted(overlap)}")
        if self.trigger_concept in self.benign_concepts:
            raise InputError("trigger concept must not be a benign concept")
        for word, syns in self.synonyms.items():
            bad = set(syns) & set(self.trigger_words)
            if bad:
                raise InputError(f"synonyms of '{word}' contain trigger words {sorted(bad)}")
        if self.rule not in (RULE_AND, RULE_XOR):
            raise InputError(f"unknown rule '{self.rule}'")


@dataclass
class World:
    """Everything one generator run produces."""

    train: list
    dev: list
    test: list
    captions: list
    provenance: list
    config: WorldConfig


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _prototypes(cfg: WorldConfig) -> dict[str, np.ndarray]:
    """Concept prototypes with pairwise distance > 4 * spread.

    Random directions are kept but the whole constellation is scaled until
    the closest pair clears the separability margin.
    """
    names = [cfg.trigger_concept] + list(cfg.benign_concepts)
    rng = RngState(cfg.seed, STREAM_WORLD).at(0)
    for _ in range(64):
        mat = rng.standard_normal((len(names), cfg.d_o))
        dists = [np.linalg.norm(mat[i] - mat[j])
                 for i in range(len(names)) for j in range(i + 1, len(names))]
        d_min = min(dists)
        if d_min > 0.0:
            mat *= max(1.0, 4.2 * cfg.prototype_spread / d_min)
            return dict(zip(names, mat))
    raise InputError("could not place distinct prototypes")


def _random_box(rng) -> np.ndarray:
    x1 = rng.uniform(0.0, 0.9)
    y1 = rng.uniform(0.0, 0.9)
    x2 = x1 + 0.05 + rng.uniform(0.0, 1.0) * (0.95 - x1)
    y2 = y1 + 0.05 + rng.uniform(0.0, 1.0) * (0.95 - y1)
    return np.array([x1, y1, x2, y2])


def _split_quotas(cfg: WorldConfig) -> dict[str, tuple[int, int]]:
    """(positives, negatives) per split; dev/test fully balanced.

    Zero-sized dev/test fractions are allowed for degenerate worlds.
    """
    n = cfg.n_samples
    dev = 2 * int(round(n * cfg.dev_fraction / 2.0))
    test = 2 * int(round(n * cfg.test_fraction / 2.0))
    train = n - dev - test
    if train <= 0 or dev < 0 or test < 0:
        raise InputError(f"n_samples={n} cannot honor the split proportions")
    train_pos = int(round(cfg.train_hateful_fraction * train))
    return {
        "train": (train_pos, train - train_pos),
        "dev": (dev // 2, dev // 2),
        "test": (test // 2, test // 2),
    }


def _check_feasible(cfg: WorldConfig, quotas: dict) -> None:
    """Positive quotas need a realizable (trigger, concept) combination."""
    def outcome_realizable(outcome: int) -> bool:
        return any(t == 0 or cfg.trigger_words
                   for t, _v in _RULE_COMBOS[(cfg.rule, outcome)])

    need_pos = any(q[0] > 0 for q in quotas.values())
    need_neg = any(q[1] > 0 for q in quotas.values())
    for label, needed in ((1, need_pos), (0, need_neg)):
        if not needed:
            continue
        outcomes = {label} if cfg.label_noise == 0.0 else {0, 1}
        for o in outcomes:
            if not outcome_realizable(o):
                raise InputError(
                    f"balance is infeasible: rule outcome {o} is unrealizable "
                    f"(rule '{cfg.rule}', {len(cfg.trigger_words)} trigger words)")


def _make_sample(cfg: WorldConfig, protos: dict, index: int, label: int):
    rng = RngState(cfg.seed, STREAM_WORLD).at(1 + index)
    sample_id = f"m{index:06d}"

    flipped = bool(rng.random() < cfg.label_noise)
    rule_outcome = label ^ int(flipped)
    combos = _RULE_COMBOS[(cfg.rule, rule_outcome)]
    if not cfg.trigger_words:
        combos = [c for c in combos if c[0] == 0]
    t, v = combos[rng.integers(0, len(combos))]

    # OCR text: benign filler, plus one trigger word when t is set
    lo, hi = cfg.text_len_range
    length = int(rng.integers(lo, hi + 1))
    words = [cfg.benign_words[i] for i in rng.integers(0, len(cfg.benign_words), length)]
    if t:
        pos = int(rng.integers(0, len(words) + 1))
        trig = cfg.trigger_words[rng.integers(0, len(cfg.trigger_words))]
        words.insert(pos, trig)
    if len(words) > 4 and rng.random() < 0.5:
        cut = int(rng.integers(2, len(words) - 1))
        words[cut - 1] = words[cut - 1] + ","
    text = " ".join(words)

    # regions: true concepts first, scrubbed view for the detector if asked
    concept_names = [cfg.benign_concepts[i]
                     for i in rng.integers(0, len(cfg.benign_concepts), cfg.n_regions)]
    if v:
        concept_names[rng.integers(0, cfg.n_regions)] = cfg.trigger_concept
    true_concepts = list(concept_names)

    regions = []
    for name in concept_names:
        shown = name
        proto = protos[name]
        if cfg.caption_only_visual and name == cfg.trigger_concept:
            shown = cfg.benign_concepts[rng.integers(0, len(cfg.benign_concepts))]
            proto = protos[shown]
        feat = proto + rng.standard_normal(cfg.d_o) * cfg.prototype_spread
        regions.append(RegionFeature(feat=feat, box=_random_box(rng),
                                     label=shown, score=float(rng.uniform(0.5, 1.0))))

    # reference captions from the true concepts (caption-visible channel)
    uniq = sorted(set(true_concepts))
    a = cfg.trigger_concept if v else uniq[int(rng.integers(0, len(uniq)))]
    others = [u for u in uniq if u != a]
    b = others[int(rng.integers(0, len(others)))] if others else a
    refs = [tpl.format(a=a, b=b) for tpl in cfg.caption_templates]

    sample = MemeSample(id=sample_id, text=text, label=label,
                        regions=regions, caption=refs[0])
    cap = CaptionSample(id=sample_id, regions=regions, references=refs)
    prov = Provenance(id=sample_id, text_trigger=bool(t), visual_trigger=bool(v),
                      noise_flipped=flipped, concepts=true_concepts, rule=cfg.rule)
    return sample, cap, prov


def gen_synthetic(cfg: WorldConfig) -> World:
    """Generate the full world; reproducible from the config seed alone."""
    protos = _prototypes(cfg)
    quotas = _split_quotas(cfg)
    _check_feasible(cfg, quotas)
    splits = {"train": [], "dev": [], "test": []}
    captions, provenance = [], []
    index = 0
    for split_name, (n_pos, n_neg) in quotas.items():
        for label, count in ((1, n_pos), (0, n_neg)):
            for _ in range(count):
                sample, cap, prov = _make_sample(cfg, protos, index, label)
                splits[split_name].append(sample)
                captions.append(cap)
                provenance.append(prov)
                index += 1
    return World(train=splits["train"], dev=splits["dev"], test=splits["test"],
                 captions=captions, provenance=provenance, config=cfg)


# ---------------------------------------------------------------------------
# persistence (JSON lines; floats keep full round-trip precision)
# ---------------------------------------------------------------------------

def _region_to_dict(r: RegionFeature) -> dict:
    return {"feat": r.feat.tolist(), "box": r.box.tolist(),
            "label": r.label, "score": r.score}


def _region_from_dict(d: dict, lineno: int) -> RegionFeature:
    for key in ("feat", "box", "label", "score"):
        if key not in d:
            raise ParseError(f"line {lineno}: region record is missing field '{key}'")
    return RegionFeature(feat=d["feat"], box=d["box"], label=d["label"], score=d["score"])


def save_memes(samples: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            rec = {"id": s.id, "text": s.text, "label": s.label,
                   "caption": s.caption,
                   "regions": [_region_to_dict(r) for r in s.regions]}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_memes(path) -> list:
    samples, seen = [], set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid record: {exc}") from exc
            for key in ("id", "text", "label", "regions"):
                if key not in rec:
                    raise ParseError(f"line {lineno}: missing field '{key}'")
            if rec["id"] in seen:
                raise IntegrityError(f"line {lineno}: duplicate id '{rec['id']}'")
            seen.add(rec["id"])
            regions = [_region_from_dict(r, lineno) for r in rec["regions"]]
            samples.append(MemeSample(id=rec["id"], text=rec["text"],
                                      label=int(rec["label"]), regions=regions,
                                      caption=rec.get("caption")))
    return samples


def save_captions(samples: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in samples:
            rec = {"id": s.id, "references": s.references,
                   "regions": [_region_to_dict(r) for r in s.regions]}
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_captions(path) -> list:
    out, seen = [], set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid record: {exc}") from exc
            for key in ("id", "references", "regions"):
                if key not in rec:
                    raise ParseError(f"line {lineno}: missing field '{key}'")
            if rec["id"] in seen:
                raise IntegrityError(f"line {lineno}: duplicate id '{rec['id']}'")
            seen.add(rec["id"])
            out.append(CaptionSample(id=rec["id"],
                                     regions=[_region_from_dict(r, lineno)
                                              for r in rec["regions"]],
                                     references=rec["references"]))
    return out


def save_provenance(records: list, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for p in records:
            f.write(json.dumps(asdict(p), ensure_ascii=False) + "\n")


def load_provenance(path) -> dict:
    """Provenance records keyed by sample id."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            out[rec["id"]] = Provenance(**rec)
    return out


def save_world(world: World, out_dir) -> None:
    from pathlib import Path
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_memes(world.train, out / "train.jsonl")
    save_memes(world.dev, out / "dev.jsonl")
    save_memes(world.test, out / "test.jsonl")
    save_captions(world.captions, out / "captions.jsonl")
    save_provenance(world.provenance, out / "provenance.jsonl")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def make_splits(samples: list, proportions: dict, balanced: dict, seed: int) -> dict:
    """Deterministic stratified split assignment.

    ``proportions`` maps split name to fraction (sums to ~1); ``balanced``
    maps split name to whether it must be fully class-balanced. Balanced
    splits draw equal counts per class first; the rest is dealt
    proportionally in label-stratified order.
    """
    if abs(sum(proportions.values()) - 1.0) > 1e-9:
        raise InputError("split proportions must sum to 1")
    rng = RngState(seed, STREAM_SPLIT).at(0)
    pools = {0: [s for s in samples if s.label == 0],
             1: [s for s in samples if s.label == 1]}
    for pool in pools.values():
        rng.shuffle(pool)

    n = len(samples)
    result = {name: [] for name in proportions}
    names = list(proportions)
    for name in names:
        if not balanced.get(name, False):
            continue
        half = int(round(n * proportions[name] / 2.0))
        for label in (0, 1):
            if len(pools[label]) < half:
                raise InputError(f"not enough label-{label} samples for split '{name}'")
            result[name].extend(pools[label][:half])
            pools[label] = pools[label][half:]
    remaining = [s for label in (0, 1) for s in pools[label]]
    free = [name for name in names if not balanced.get(name, False)]
    total_free = sum(proportions[name] for name in free)
    start = 0
    for i, name in enumerate(free):
        count = (len(remaining) - start if i == len(free) - 1
                 else int(round(len(remaining) * proportions[name] / total_free)))
        result[name].extend(remaining[start:start + count])
        start += count
    return result
