"""Task streams: seeded synthetic scenario builders and dataset file I/O.

Each task pairs a real distribution (a shared base Gaussian, nudged by a
small per-task shift so that reals overlap across tasks) with a fake
Gaussian mixture whose component means sit ``difficulty`` standard
deviations away from the reals, in directions kept apart across tasks.

Dataset file schema (UTF-8 CSV, no quoting):
    header  task_id,split,label,f0,...,f{d-1}
    rows    one record per line; split in {train,val,test};
            label 0 = real, 1 = fake; '.' decimal point
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .model import FAKE, REAL

EASY = "easy"
HARD = "hard"
LONG = "long"
SCENARIO_KINDS = (EASY, HARD, LONG)

SPLITS = ("train", "val", "test")

# Symmetric-KL threshold separating "same reals" from "distinct fakes".
DEFAULT_OVERLAP_BOUND = 2.0

_DEFAULT_COUNTS = {"train": 300, "val": 60, "test": 150}  # per polarity
_EASY_DIFFICULTY = 6.0
_WILD_DIFFICULTY = 2.5
_SMALL_DIFFICULTY = 3.5


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    base_mean: tuple[float, ...]
    real_shift: tuple[float, ...]
    fake_means: tuple[tuple[float, ...], ...]
    cov_scale: float
    difficulty: float
    n_train: int
    n_val: int
    n_test: int

    def __post_init__(self):
        if self.cov_scale <= 0:
            raise ConfigError("covariance scale must be positive")
        if min(self.n_train, self.n_val, self.n_test) <= 0:
            raise ConfigError("split counts must be positive")
        if self.difficulty <= 0:
            raise ConfigError("difficulty must be positive")


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass
class SessionData:
    task_id: int
    name: str
    train: Split
    val: Split
    test: Split

    def splits(self) -> dict[str, Split]:
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass
class Scenario:
    kind: str
    seed: int
    tasks: list[TaskSpec]
    warmup: TaskSpec | None
    budget: int = 1500

    def __len__(self) -> int:
        return len(self.tasks)


def _sample_split(spec: TaskSpec, rng: np.random.Generator, split: str, n: int) -> Split:
    d = len(spec.base_mean)
    real_mean = np.asarray(spec.base_mean) + np.asarray(spec.real_shift)
    reals = real_mean + spec.cov_scale * rng.standard_normal((n, d))
    comps = rng.integers(0, len(spec.fake_means), size=n)
    fake_means = np.asarray(spec.fake_means)
    fakes = fake_means[comps] + spec.cov_scale * rng.standard_normal((n, d))
    x = np.vstack([reals, fakes])
    y = np.concatenate([np.full(n, REAL), np.full(n, FAKE)]).astype(np.int64)
    ids = [f"{spec.task_id}-{split}-{i}" for i in range(2 * n)]
    return Split(x, y, ids)


def synth_generate(spec: TaskSpec, seed: int) -> SessionData:
    """Deterministic session draw for one task under (spec, seed)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1000 + spec.task_id,)))
    return SessionData(
        task_id=spec.task_id,
        name=spec.name,
        train=_sample_split(spec, rng, "train", spec.n_train),
        val=_sample_split(spec, rng, "val", spec.n_val),
        test=_sample_split(spec, rng, "test", spec.n_test),
    )


def _spread_directions(rng: np.random.Generator, count: int, dim: int, max_cos: float = 0.55) -> np.ndarray:
    """Unit vectors kept pairwise apart; resamples until |cos| < max_cos."""
    dirs: list[np.ndarray] = []
    while len(dirs) < count:
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        if all(abs(float(v @ u)) < max_cos for u in dirs):
            dirs.append(v)
    return np.asarray(dirs)


def _source_specs(seed: int, dim: int) -> list[TaskSpec]:
    """Thirteen source definitions: a warm-up source plus twelve stream sources."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    n_sources = 13
    components = 2
    dirs = _spread_directions(rng, n_sources * components, dim)
    base = np.zeros(dim)
    counts = _DEFAULT_COUNTS

    specs: list[TaskSpec] = []
    for sid in range(n_sources):
        if sid == 0:
            name, difficulty, n_train = "warmup", _EASY_DIFFICULTY, counts["train"]
        else:
            name = f"src{sid:02d}"
            if sid in (7, 11):
                difficulty, n_train = _WILD_DIFFICULTY, counts["train"]
            elif sid == 12:
                difficulty, n_train = _SMALL_DIFFICULTY, counts["train"] // 10
            else:
                difficulty, n_train = _EASY_DIFFICULTY, counts["train"]
        shift = rng.standard_normal(dim)
        shift *= 0.35 / np.linalg.norm(shift)
        fake_means = tuple(
            tuple(base + difficulty * dirs[sid * components + c])
            for c in range(components)
        )
        specs.append(
            TaskSpec(
                task_id=sid,
                name=name,
                base_mean=tuple(base),
                real_shift=tuple(shift),
                fake_means=fake_means,
                cov_scale=1.0,
                difficulty=difficulty,
                n_train=n_train,
                n_val=counts["val"],
                n_test=counts["test"],
            )
        )
    return specs


_SCENARIO_SOURCES = {
    EASY: [1, 2, 3, 4, 5, 6, 7],
    HARD: [1, 2, 7, 11, 12],
    LONG: [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
}


def build_scenario(
    kind: str,
    seed: int,
    with_warmup: bool = True,
    budget: int = 1500,
    feature_dim: int = 16,
) -> Scenario:
    """Seeded scenario: easy (7 tasks), hard (5, with two low-separation
    sources and one small-data source), or long (all 12)."""
    if kind not in SCENARIO_KINDS:
        raise ConfigError(f"unknown scenario kind {kind!r}")
    specs = _source_specs(seed, feature_dim)
    tasks = [specs[sid] for sid in _SCENARIO_SOURCES[kind]]
    warmup = specs[0] if with_warmup else None
    return Scenario(kind=kind, seed=seed, tasks=tasks, warmup=warmup, budget=budget)


# ---------------------------------------------------------------------------
# analytic overlap checks


def symmetric_kl_isotropic(mu_a, mu_b, sigma: float) -> float:
    """KL(a||b) + KL(b||a) for equal isotropic Gaussians: ||mu_a - mu_b||^2 / sigma^2."""
    delta = np.asarray(mu_a, dtype=np.float64) - np.asarray(mu_b, dtype=np.float64)
    return float(delta @ delta) / (sigma * sigma)


def verify_overlap(scenario: Scenario, bound: float = DEFAULT_OVERLAP_BOUND) -> bool:
    """Reals of any two tasks stay below the bound; their fakes exceed it."""
    tasks = scenario.tasks
    for i in range(len(tasks)):
        for j in range(i + 1, len(tasks)):
            a, b = tasks[i], tasks[j]
            real_a = np.asarray(a.base_mean) + np.asarray(a.real_shift)
            real_b = np.asarray(b.base_mean) + np.asarray(b.real_shift)
            if symmetric_kl_isotropic(real_a, real_b, a.cov_scale) >= bound:
                return False
            closest = min(
                symmetric_kl_isotropic(ma, mb, a.cov_scale)
                for ma in a.fake_means
                for mb in b.fake_means
            )
            if closest <= bound:
                return False
    return True


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(session: SessionData, path) -> None:
    width = session.train.x.shape[1]
    header = ["task_id", "split", "label"] + [f"f{i}" for i in range(width)]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for split_name, split in session.splits().items():
            for row, label in zip(split.x, split.y):
                writer.writerow([session.task_id, split_name, int(label)] + [repr(float(v)) for v in row])


def load_dataset(path) -> SessionData:
    """Parse one task's records; malformed rows fail with their line number."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty dataset file", line=1)
    header = lines[0].split(",")
    if header[:3] != ["task_id", "split", "label"]:
        raise ParseError("header must start with task_id,split,label", line=1)
    width = len(header) - 3
    if width < 1 or header[3:] != [f"f{i}" for i in range(width)]:
        raise ParseError("feature columns must be f0..f{d-1}", line=1)

    rows: dict[str, list[tuple[np.ndarray, int]]] = {s: [] for s in SPLITS}
    task_id: int | None = None
    name = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != 3 + width:
            raise ParseError(f"expected {3 + width} fields, found {len(fields)}", line=lineno)
        try:
            row_task = int(fields[0])
        except ValueError:
            raise ParseError(f"bad task id {fields[0]!r}", line=lineno) from None
        if task_id is None:
            task_id = row_task
            name = f"data{row_task}"
        elif row_task != task_id:
            raise ParseError(f"mixed task ids {task_id} and {row_task}", line=lineno)
        split = fields[1]
        if split not in SPLITS:
            raise ParseError(f"unknown split tag {split!r}", line=lineno)
        if fields[2] not in ("0", "1"):
            raise ParseError(f"label must be 0 or 1, found {fields[2]!r}", line=lineno)
        try:
            values = np.array([float(v) for v in fields[3:]], dtype=np.float64)
        except ValueError:
            raise ParseError("non-numeric feature value", line=lineno) from None
        rows[split].append((values, int(fields[2])))

    if task_id is None:
        raise ParseError("dataset holds no records", line=2)

    splits: dict[str, Split] = {}
    for split_name in SPLITS:
        records = rows[split_name]
        if records:
            x = np.vstack([r[0] for r in records])
            y = np.array([r[1] for r in records], dtype=np.int64)
        else:
            x = np.zeros((0, width))
            y = np.zeros(0, dtype=np.int64)
        ids = [f"{task_id}-{split_name}-{i}" for i in range(len(records))]
        splits[split_name] = Split(x, y, ids)

    for required in ("train", "test"):
        y = splits[required].y
        if not ((y == REAL).any() and (y == FAKE).any()):
            raise ParseError(f"split {required!r} needs both real and fake records")

    return SessionData(task_id=task_id, name=name, train=splits["train"], val=splits["val"], test=splits["test"])
