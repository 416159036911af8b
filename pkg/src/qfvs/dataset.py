"""Annotated shot sequences, concept queries and the bundle file format.

Bundle files are UTF-8 JSON lines, one record per line, in this order::

    {"record": "header", "format": "qfvs-bundle", "version": 1, counts..., "meta": {...}}
    {"record": "concept", "index": i, "name": str, "embedding": [float, ...]}     x n_concepts
    {"record": "video", "id": str, "n_shots": int, "shot_seconds": float}        per video,
    {"record": "shot", "video": str, "index": i, "tags": [str], "feature": [..]}  followed by its shots
    {"record": "query", "video": str, "concepts": [c1, c2], "scenario": str, "oracle": [int]}
    {"record": "end", "n_records": int}

Floats are written with their shortest round-trip representation, so
save/load is lossless. The ``end`` record guards against truncation.
"""

from __future__ import annotations

import hashlib
import io
import json
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Rng

FORMAT = "qfvs-bundle"
VERSION = 1
EMBEDDING_DIM = 300
SHOT_SECONDS = 5.0

BOTH_JOINT = "both-joint"
BOTH_DISJOINT = "both-disjoint"
ONE_PRESENT = "one-present"
NONE_PRESENT = "none-present"
SCENARIOS = (BOTH_JOINT, BOTH_DISJOINT, ONE_PRESENT, NONE_PRESENT)

DEFAULT_CONCEPTS = (
    "FOOD", "SKY", "LADY", "MEN", "KIDS", "CAR", "TREE", "SIGN", "STREET", "WATER",
    "BOOK", "PHONE", "CHAIR", "TABLE", "DRINK", "BUILDING", "WINDOW", "DOOR", "HAT", "FLOWER",
    "GRASS", "ROAD", "BIKE", "BAG", "COMPUTER", "CUP", "SHOE", "GLASSES", "TOY", "PLANT",
    "SHOP", "CLOUD", "BEACH", "BOAT", "DOG", "CAT", "BIRD", "HAND", "FACE", "LIGHT",
    "CLOCK", "STAIRS", "BRIDGE", "TRAIN", "BUS", "MARKET", "KITCHEN", "PAPER",
)


class GenerationError(RuntimeError):
    pass


class BundleParseError(ValueError):
    def __init__(self, message, line=None, offset=None):
        where = ""
        if line is not None:
            where = f"line {line}"
            if offset is not None:
                where += f", offset {offset}"
            where += ": "
        super().__init__(where + message)
        self.line = line
        self.offset = offset


@dataclass
class ConceptLexicon:
    names: tuple
    embeddings: np.ndarray  # [K, embedding_dim]

    def __post_init__(self):
        self.names = tuple(self.names)
        if len(set(self.names)) != len(self.names):
            raise ValueError("concept names must be unique")
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.shape[0] != len(self.names):
            raise ValueError(f"{len(self.names)} names but {self.embeddings.shape[0]} embeddings")

    def index(self, name):
        return self.names.index(name)

    def embedding(self, name):
        return self.embeddings[self.index(name)]

    def __contains__(self, name):
        return name in self.names


@dataclass
class ShotSequence:
    video_id: str
    features: np.ndarray  # [N, C]
    tags: list  # N frozensets of concept names
    shot_seconds: float = SHOT_SECONDS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.tags = [frozenset(t) for t in self.tags]
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ContractError(f"video {self.video_id}: need a non-empty [N, C] feature matrix")
        if len(self.tags) != self.features.shape[0]:
            raise ContractError(f"video {self.video_id}: {len(self.tags)} tag sets for {self.features.shape[0]} shots")

    @property
    def n_shots(self):
        return self.features.shape[0]

    def concepts_present(self):
        return frozenset().union(*self.tags)


@dataclass(frozen=True)
class QuerySpec:
    concepts: tuple
    e1: np.ndarray = field(compare=False, repr=False)
    e2: np.ndarray = field(compare=False, repr=False)
    scenario: str = ""

    def __post_init__(self):
        if len(self.concepts) != 2 or self.concepts[0] == self.concepts[1]:
            raise ValueError(f"a query needs two distinct concepts, got {self.concepts}")

    @property
    def h_q(self):
        return (self.e1 + self.e2) / 2.0

    @classmethod
    def build(cls, lexicon: ConceptLexicon, c1, c2, scenario=""):
        return cls((c1, c2), lexicon.embedding(c1), lexicon.embedding(c2), scenario)


@dataclass
class DatasetBundle:
    lexicon: ConceptLexicon
    videos: list
    queries: dict  # video_id -> [QuerySpec]
    meta: dict = field(default_factory=dict)

    def video(self, video_id):
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise KeyError(f"no video {video_id!r}; have {[v.video_id for v in self.videos]}")

    def oracle(self, video_id, query):
        return oracle_summary(self.video(video_id), query)

    def folds(self):
        """Leave-one-video-out splits: ``(held_out_id, [train ids])``."""
        ids = [v.video_id for v in self.videos]
        return [(held, [i for i in ids if i != held]) for held in ids]


# ---------------------------------------------------------------------------
# labels and scenarios
# ---------------------------------------------------------------------------

def ground_truth_labels(video: ShotSequence, query: QuerySpec):
    wanted = set(query.concepts)
    return np.array([1 if wanted & tags else 0 for tags in video.tags], dtype=np.int64)


def oracle_summary(video: ShotSequence, query: QuerySpec):
    return np.flatnonzero(ground_truth_labels(video, query))


def classify_scenario(video: ShotSequence, c1, c2):
    present = video.concepts_present()
    has1, has2 = c1 in present, c2 in present
    if has1 and has2:
        joint = any(c1 in t and c2 in t for t in video.tags)
        return BOTH_JOINT if joint else BOTH_DISJOINT
    if has1 or has2:
        return ONE_PRESENT
    return NONE_PRESENT


def audit_scenarios(bundle: DatasetBundle):
    """Return a list of (video_id, concepts, declared, actual) mismatches."""
    problems = []
    for video in bundle.videos:
        for q in bundle.queries.get(video.video_id, []):
            actual = classify_scenario(video, *q.concepts)
            if actual != q.scenario:
                problems.append((video.video_id, q.concepts, q.scenario, actual))
    return problems


def scenario_counts(bundle: DatasetBundle):
    counts = {s: 0 for s in SCENARIOS}
    for qs in bundle.queries.values():
        for q in qs:
            counts[q.scenario] = counts.get(q.scenario, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    n_videos: int = 4
    shots_per_video: int = 200
    feature_dim: int = 64
    noise_sigma: float = 0.1
    seed: int = 7
    n_concepts: int = 12
    embedding_dim: int = EMBEDDING_DIM
    scene_min: int = 4
    scene_max: int = 20
    tag_drop: float = 0.15
    absent_per_video: int = 2
    queries_per_scenario: tuple = (3, 3, 3, 1)


def _unit_rows(rng, n, dim):
    x = rng.normal(0.0, 1.0, (n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(cfg: SyntheticConfig = None, **overrides) -> DatasetBundle:
    """Deterministic synthetic videos with dense per-shot concept tags.

    Each video is a run of scenes; a scene draws 0-3 concepts and its shots
    carry that set, each tag dropped independently with ``tag_drop``. A
    rotating block of ``absent_per_video`` concepts never appears in a video
    so that one-present and none-present queries always exist. A shot's
    feature is the normalised sum of its concepts' prototypes plus Gaussian
    noise.
    """
    cfg = dataclasses.replace(cfg or SyntheticConfig(), **overrides)
    if cfg.n_videos < 2:
        raise GenerationError("leave-one-video-out needs at least 2 videos")
    if cfg.n_concepts > len(DEFAULT_CONCEPTS):
        raise GenerationError(f"at most {len(DEFAULT_CONCEPTS)} concepts are available")
    if cfg.absent_per_video < 2 or cfg.n_concepts - cfg.absent_per_video < 3:
        raise GenerationError(
            f"lexicon of {cfg.n_concepts} concepts cannot host every query scenario "
            f"with {cfg.absent_per_video} absent concepts per video"
        )
    if cfg.shots_per_video < 1:
        raise GenerationError("shots_per_video must be positive")

    root = Rng(cfg.seed)
    names = DEFAULT_CONCEPTS[: cfg.n_concepts]
    embeddings = _unit_rows(root.child(0), cfg.n_concepts, cfg.embedding_dim)
    prototypes = _unit_rows(root.child(1), cfg.n_concepts, cfg.feature_dim)
    lexicon = ConceptLexicon(names, embeddings)

    videos, queries = [], {}
    for v in range(cfg.n_videos):
        rng = root.child(2, v)
        absent = {(v * cfg.absent_per_video + i) % cfg.n_concepts for i in range(cfg.absent_per_video)}
        vocab = np.array([i for i in range(cfg.n_concepts) if i not in absent])
        tags = []
        while len(tags) < cfg.shots_per_video:
            length = int(rng.integers(cfg.scene_min, cfg.scene_max + 1))
            size = int(rng.choice(4, p=[0.15, 0.35, 0.3, 0.2]))
            scene = [int(c) for c in rng.choice(vocab, size=size, replace=False)]
            for _ in range(length):
                keep = [c for c in scene if rng.random() >= cfg.tag_drop]
                tags.append(frozenset(keep))
        tags = tags[: cfg.shots_per_video]
        features = np.zeros((cfg.shots_per_video, cfg.feature_dim))
        for i, t in enumerate(tags):
            if t:
                vec = prototypes[sorted(t)].sum(axis=0)
                features[i] = vec / np.linalg.norm(vec)
        if cfg.noise_sigma > 0:
            features += rng.normal(0.0, cfg.noise_sigma, features.shape)
        video = ShotSequence(f"video{v + 1}", features, [frozenset(names[c] for c in t) for t in tags])
        videos.append(video)
        queries[video.video_id] = _make_queries(video, lexicon, sorted(absent), rng, cfg.queries_per_scenario)

    meta = {"generator": "synthetic", "seed": cfg.seed, "noise_sigma": cfg.noise_sigma}
    return DatasetBundle(lexicon, videos, queries, meta)


def _make_queries(video, lexicon, absent_idx, rng, per_scenario):
    names = lexicon.names
    present = sorted(video.concepts_present(), key=names.index)
    absent = [names[i] for i in absent_idx]
    pairs = {s: [] for s in SCENARIOS}
    for i, a in enumerate(present):
        for b in present[i + 1:]:
            pairs[classify_scenario(video, a, b)].append((a, b))
    pairs[ONE_PRESENT] = [(a, b) for a in present for b in absent]
    pairs[NONE_PRESENT] = [(a, b) for i, a in enumerate(absent) for b in absent[i + 1:]]

    out = []
    for scenario, want in zip(SCENARIOS, per_scenario):
        pool = pairs[scenario]
        if want and not pool:
            raise GenerationError(f"{video.video_id}: no concept pair realises scenario {scenario!r}")
        picks = rng.choice(len(pool), size=min(want, len(pool)), replace=False) if want else []
        for p in sorted(int(x) for x in picks):
            a, b = pool[p]
            if rng.random() < 0.5:
                a, b = b, a
            out.append(QuerySpec.build(lexicon, a, b, scenario))
    return out


def bundle_from_arrays(concepts, embeddings, videos, queries, meta=None):
    """Assemble a bundle from precomputed features.

    ``videos`` maps a video id to ``(features [N, C], tag sets)``; ``queries``
    maps a video id to concept pairs. Scenario tags are derived from the tags.
    """
    lexicon = ConceptLexicon(tuple(concepts), embeddings)
    seqs = [ShotSequence(vid, feats, tags) for vid, (feats, tags) in videos.items()]
    qmap = {}
    for seq in seqs:
        qmap[seq.video_id] = [
            QuerySpec.build(lexicon, a, b, classify_scenario(seq, a, b)) for a, b in queries.get(seq.video_id, [])
        ]
    return DatasetBundle(lexicon, seqs, qmap, dict(meta or {}))


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _dumps(record):
    return json.dumps(record, separators=(",", ":"), allow_nan=False)


def iter_records(bundle: DatasetBundle):
    lex = bundle.lexicon
    n_queries = sum(len(q) for q in bundle.queries.values())
    yield {
        "record": "header",
        "format": FORMAT,
        "version": VERSION,
        "n_concepts": len(lex.names),
        "n_videos": len(bundle.videos),
        "n_shots": sum(v.n_shots for v in bundle.videos),
        "n_queries": n_queries,
        "meta": bundle.meta,
    }
    for i, name in enumerate(lex.names):
        yield {"record": "concept", "index": i, "name": name, "embedding": lex.embeddings[i].tolist()}
    for video in bundle.videos:
        yield {"record": "video", "id": video.video_id, "n_shots": video.n_shots, "shot_seconds": video.shot_seconds}
        for i in range(video.n_shots):
            yield {
                "record": "shot",
                "video": video.video_id,
                "index": i,
                "tags": sorted(video.tags[i], key=lex.names.index),
                "feature": video.features[i].tolist(),
            }
    for video in bundle.videos:
        for q in bundle.queries.get(video.video_id, []):
            yield {
                "record": "query",
                "video": video.video_id,
                "concepts": list(q.concepts),
                "scenario": q.scenario,
                "oracle": oracle_summary(video, q).tolist(),
            }


def dumps_bundle(bundle: DatasetBundle) -> str:
    buf = io.StringIO()
    n = 0
    for record in iter_records(bundle):
        buf.write(_dumps(record) + "\n")
        n += 1
    buf.write(_dumps({"record": "end", "n_records": n + 1}) + "\n")
    return buf.getvalue()


def save_bundle(bundle: DatasetBundle, path):
    text = dumps_bundle(bundle)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def bundle_digest(bundle: DatasetBundle) -> str:
    return hashlib.sha256(dumps_bundle(bundle).encode("utf-8")).hexdigest()


def _require(record, key, kind, lineno):
    if key not in record:
        raise BundleParseError(f"{record.get('record')} record lacks {key!r}", lineno)
    value = record[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise BundleParseError(f"field {key!r} should be {kind.__name__}", lineno)
    return value


def loads_bundle(text: str) -> DatasetBundle:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    records = []
    for lineno, line in enumerate(lines, 1):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BundleParseError(exc.msg, lineno, exc.pos) from None
        if not isinstance(rec, dict) or "record" not in rec:
            raise BundleParseError("expected an object with a 'record' field", lineno, 0)
        records.append((lineno, rec))
    if not records or records[0][1]["record"] != "header":
        raise BundleParseError("first record must be the header", 1)
    _, header = records[0]
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise BundleParseError(f"unsupported format {header.get('format')!r} v{header.get('version')}", 1)
    last_no, last = records[-1]
    if last["record"] != "end":
        raise BundleParseError(f"file ends without an 'end' record (truncated after line {last_no})", last_no)
    if _require(last, "n_records", int, last_no) != len(records):
        raise BundleParseError(f"end record announces {last['n_records']} records, found {len(records)}", last_no)

    names, embeds = [], []
    videos = []  # [video_id, n_shots, shot_seconds, features, tags]
    raw_queries = []
    for lineno, rec in records[1:-1]:
        kind = rec["record"]
        if kind == "concept":
            if _require(rec, "index", int, lineno) != len(names):
                raise BundleParseError("concept records out of order", lineno)
            names.append(_require(rec, "name", str, lineno))
            embeds.append(_require(rec, "embedding", list, lineno))
        elif kind == "video":
            videos.append([
                _require(rec, "id", str, lineno), _require(rec, "n_shots", int, lineno),
                _require(rec, "shot_seconds", float, lineno), [], [],
            ])
        elif kind == "shot":
            if not videos or rec.get("video") != videos[-1][0]:
                raise BundleParseError("shot record outside its video block", lineno)
            cur = videos[-1]
            if _require(rec, "index", int, lineno) != len(cur[3]):
                raise BundleParseError("shot records out of order", lineno)
            tags = _require(rec, "tags", list, lineno)
            unknown = [t for t in tags if t not in names]
            if unknown:
                raise BundleParseError(f"unknown concepts {unknown}", lineno)
            cur[3].append(_require(rec, "feature", list, lineno))
            cur[4].append(frozenset(tags))
        elif kind == "query":
            raw_queries.append((lineno, rec))
        else:
            raise BundleParseError(f"unknown record type {kind!r}", lineno)

    if len(names) != header.get("n_concepts") or len(videos) != header.get("n_videos"):
        raise BundleParseError("record counts disagree with the header", 1)
    try:
        lexicon = ConceptLexicon(tuple(names), np.array(embeds, dtype=np.float64))
    except ValueError as exc:
        raise BundleParseError(f"bad concept table: {exc}") from None
    seqs = []
    for vid, n, secs, feats, tags in videos:
        if len(feats) != n:
            raise BundleParseError(f"video {vid!r} announces {n} shots, found {len(feats)}")
        try:
            seqs.append(ShotSequence(vid, np.array(feats, dtype=np.float64), tags, secs))
        except (ValueError, ContractError) as exc:
            raise BundleParseError(f"video {vid!r}: {exc}") from None
    by_id = {s.video_id: s for s in seqs}
    queries = {s.video_id: [] for s in seqs}
    for lineno, rec in raw_queries:
        vid = _require(rec, "video", str, lineno)
        if vid not in by_id:
            raise BundleParseError(f"query for unknown video {vid!r}", lineno)
        pair = _require(rec, "concepts", list, lineno)
        if len(pair) != 2 or any(c not in names for c in pair):
            raise BundleParseError(f"bad query concepts {pair}", lineno)
        q = QuerySpec.build(lexicon, pair[0], pair[1], _require(rec, "scenario", str, lineno))
        if "oracle" in rec and list(rec["oracle"]) != oracle_summary(by_id[vid], q).tolist():
            raise BundleParseError("stored oracle summary disagrees with the shot tags", lineno)
        queries[vid].append(q)
    if sum(len(q) for q in queries.values()) != header.get("n_queries"):
        raise BundleParseError("query count disagrees with the header", 1)
    return DatasetBundle(lexicon, seqs, queries, dict(header.get("meta") or {}))


def load_bundle(path) -> DatasetBundle:
    with open(path, encoding="utf-8") as fh:
        return loads_bundle(fh.read())


def load_embedding_table(path, dim=EMBEDDING_DIM):
    """Read ``concept<TAB>v1 v2 ...`` lines into a name -> vector dict."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            name, _, rest = line.partition("\t")
            try:
                vec = np.array(rest.replace("\t", " ").split(), dtype=np.float64)
            except ValueError:
                raise BundleParseError("non-numeric embedding value", lineno) from None
            if vec.size != dim:
                raise BundleParseError(f"expected {dim} values for {name!r}, got {vec.size}", lineno)
            table[name.strip()] = vec
    return table


def with_embeddings(bundle: DatasetBundle, table) -> DatasetBundle:
    """Copy of ``bundle`` whose concept embeddings come from ``table``."""
    missing = [n for n in bundle.lexicon.names if n not in table]
    if missing:
        raise KeyError(f"embedding table lacks concepts {missing}")
    lexicon = ConceptLexicon(bundle.lexicon.names, np.stack([table[n] for n in bundle.lexicon.names]))
    queries = {
        vid: [QuerySpec.build(lexicon, *q.concepts, q.scenario) for q in qs] for vid, qs in bundle.queries.items()
    }
    return DatasetBundle(lexicon, bundle.videos, queries, dict(bundle.meta))
