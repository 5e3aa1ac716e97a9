"""N-way one-shot evaluation, the repeated-run protocol and baselines."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .autodiff.checkpoint import atomic_write

ARCH_LABELS = {
    "conv": "convolutional Siamese",
    "residual": "residual Siamese",
    "nearest_neighbor": "nearest neighbour",
    "random": "random guessing",
}
REPR_LABELS = {"scalogram": "Scalogram", "spectrogram": "Spectogram"}
CSV_COLUMNS = ["n_train", "n_test", "architecture", "representation", "runs", "trials", "max_acc", "mean_acc"]


@dataclass(frozen=True)
class Exemplar:
    label: str
    key: str
    image: np.ndarray


@dataclass(frozen=True)
class OneShotTask:
    support: tuple  # Exemplar per class, ordered by class index
    query: Exemplar

    def __post_init__(self):
        labels = [s.label for s in self.support]
        if len(set(labels)) != len(labels):
            raise ValueError("support classes must be distinct")
        if self.support and self.query.label not in labels:
            raise ValueError("query class missing from support set")

    @property
    def answer(self):
        return [s.label for s in self.support].index(self.query.label)


def _argmax_first(scores):
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def one_shot_trial(model, task, scores=None):
    """Index of the support class with the highest pair probability.

    Ties go to the lowest index. ``scores`` may carry precomputed ``P_k``.
    """
    if not task.support:
        raise ValueError("empty support set")
    if scores is None:
        scores = [model.predict_pair(task.query.image, s.image).p for s in task.support]
    return _argmax_first(scores)


def nearest_neighbor_baseline(task):
    """Support class whose grayscale plane is closest to the query in L1."""
    if not task.support:
        raise ValueError("empty support set")
    q = _gray(task.query.image)
    dists = [np.abs(_gray(s.image) - q).sum(dtype=np.float64) for s in task.support]
    return int(np.argmin(dists))


def random_baseline(n_way, rng):
    if n_way < 1:
        raise ValueError("n_way must be at least 1")
    return int(rng.integers(n_way))


def _gray(image):
    a = np.asarray(image.pixels if hasattr(image, "pixels") else image, dtype=np.float64)
    return a[..., 0] if a.ndim == 3 else a


def generate_tasks(manifest, split, images, n_way, trials, rng):
    """Sample ``trials`` tasks over test classes, one support image per class.

    The query shares a class with exactly one support image and is a
    different file from it.
    """
    classes = [c for c in manifest.classes if c in set(split.test_classes)]
    if len(classes) < n_way:
        raise ValueError(f"{len(classes)} test classes cannot form {n_way}-way tasks")
    pools = {}
    for c in classes:
        keys = [k for k in manifest.entries[c] if k in images]
        if len(keys) < 2:
            raise ValueError(f"test class {c!r} needs at least 2 images, has {len(keys)}")
        pools[c] = keys
    train = set(split.train_classes)
    tasks = []
    for _ in range(trials):
        picked = sorted(rng.choice(len(classes), size=n_way, replace=False).tolist())
        chosen = [classes[i] for i in picked]
        target = int(rng.integers(n_way))
        support = []
        query = None
        for pos, c in enumerate(chosen):
            if c in train:
                raise AssertionError("evaluation touched a training class")
            pool = pools[c]
            if pos == target:
                i, j = rng.choice(len(pool), size=2, replace=False)
                support.append(Exemplar(c, pool[i], images[pool[i]]))
                query = Exemplar(c, pool[j], images[pool[j]])
            else:
                k = pool[rng.integers(len(pool))]
                support.append(Exemplar(c, k, images[k]))
        tasks.append(OneShotTask(tuple(support), query))
    return tasks


def task_scores(model, tasks):
    """``P_k`` arrays per task; Siamese models embed every distinct image once."""
    if hasattr(model, "embed_many") and hasattr(model, "merge_probabilities"):
        keys = sorted({e.key for t in tasks for e in (t.query, *t.support)})
        lookup = {}
        for t in tasks:
            for e in (t.query, *t.support):
                lookup[e.key] = e.image
        emb = model.embed_many(np.stack([lookup[k] for k in keys]))
        row = {k: i for i, k in enumerate(keys)}
        return [
            model.merge_probabilities(emb[row[t.query.key]], emb[[row[s.key] for s in t.support]])
            for t in tasks
        ]
    return [np.array([model.predict_pair(t.query.image, s.image).p for s in t.support]) for t in tasks]


def evaluate_tasks(model, tasks):
    scores = task_scores(model, tasks)
    correct = sum(one_shot_trial(model, t, s) == t.answer for t, s in zip(tasks, scores))
    return correct / len(tasks)


def evaluate_baselines(tasks, rng):
    nn = sum(nearest_neighbor_baseline(t) == t.answer for t in tasks) / len(tasks)
    rnd = sum(random_baseline(len(t.support), rng) == t.answer for t in tasks) / len(tasks)
    return {"nearest_neighbor": nn, "random": rnd}


def run_evaluation(model, manifest, split, images, n_way, trials, rng):
    """One-shot accuracy of ``model`` over freshly sampled test-class tasks."""
    return evaluate_tasks(model, generate_tasks(manifest, split, images, n_way, trials, rng))


# ------------------------------------------------------------------ protocol

def derived_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def summarize(accuracies):
    """``(max, mean)`` with the mean clamped against rounding above the max."""
    if not accuracies:
        raise ValueError("no accuracies to summarize")
    best = max(accuracies)
    return best, min(math.fsum(accuracies) / len(accuracies), best)


class ProtocolError(RuntimeError):
    pass


def protocol_max_mean(runner, repetitions=10, seed=0, record=None):
    """Run ``runner(index, seed)`` for each repetition; report max and mean accuracy.

    ``runner`` returns an accuracy, or a dict with an ``"accuracy"`` entry
    (the whole dict is appended to ``record`` when given).
    """
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    accs = []
    for i in range(repetitions):
        try:
            out = runner(i, derived_seed(seed, i))
        except Exception as exc:
            raise ProtocolError(f"repetition {i} failed: {exc}") from exc
        if isinstance(out, dict):
            accs.append(float(out["accuracy"]))
            if record is not None:
                record.append(out)
        else:
            accs.append(float(out))
            if record is not None:
                record.append({"accuracy": float(out)})
    return summarize(accs)


# -------------------------------------------------------------------- report

@dataclass(frozen=True)
class EvalRow:
    n_train: int
    n_test: int
    representation: str
    architecture: str
    max_accuracy: float
    mean_accuracy: float
    runs: int
    trials_per_run: int

    def __post_init__(self):
        if not 0 <= self.mean_accuracy <= self.max_accuracy <= 1:
            raise ValueError(
                f"need 0 <= mean ({self.mean_accuracy}) <= max ({self.max_accuracy}) <= 1"
            )
        if self.runs < 1:
            raise ValueError("runs must be at least 1")


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([
            r.n_train, r.n_test, r.architecture, r.representation, r.runs,
            r.trials_per_run, repr(float(r.max_accuracy)), repr(float(r.mean_accuracy)),
        ])
    return buf.getvalue()


def rows_from_csv(text):
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        rows.append(EvalRow(
            int(d["n_train"]), int(d["n_test"]), d["representation"], d["architecture"],
            float(d["max_acc"]), float(d["mean_acc"]), int(d["runs"]), int(d["trials"]),
        ))
    return rows


def write_csv(path, rows):
    atomic_write(path, rows_to_csv(rows), mode="w")


def read_csv(path):
    with open(path) as fh:
        return rows_from_csv(fh.read())


def table_columns(rows):
    archs = ["conv", "residual"] + sorted({r.architecture for r in rows} - {"conv", "residual"})
    reprs = ["scalogram", "spectrogram"]
    return [(a, rp) for a in archs for rp in reprs]


def report_table(rows):
    """Text grid: one line per (train, test) split, columns architecture x representation x {max, mean}."""
    if not rows:
        raise ValueError("no rows to report")
    cols = table_columns(rows)
    cells = {(r.n_train, r.n_test, r.architecture, r.representation): r for r in rows}
    splits = sorted({(r.n_train, r.n_test) for r in rows})
    archs = list(dict.fromkeys(a for a, _ in cols))

    def pct(x):
        return f"{round(100 * x):d}%"

    width = 6
    head1 = ["Training", "Testing"] + [ARCH_LABELS.get(a, a).center(4 * width + 3) for a in archs]
    head2 = ["data", "data"] + [
        " ".join(REPR_LABELS[rp].center(2 * width + 1) for rp in ("scalogram", "spectrogram")) for _ in archs
    ]
    head3 = ["sets", "sets"] + [" ".join(["max".center(width), "mean".center(width)] * 2) for _ in archs]
    lines = [" | ".join(h) for h in (head1, head2, head3)]
    lines.insert(0, "-" * len(lines[0]))
    lines.append("-" * len(lines[1]))
    for ntr, nte in splits:
        parts = [f"{ntr:>8}", f"{nte:>7}"]
        for a in archs:
            vals = []
            for rp in ("scalogram", "spectrogram"):
                r = cells.get((ntr, nte, a, rp))
                if r is None:
                    vals += ["-".center(width)] * 2
                else:
                    vals += [pct(r.max_accuracy).center(width), pct(r.mean_accuracy).center(width)]
            parts.append(" ".join(vals))
        lines.append(" | ".join(parts))
    lines.append("-" * len(lines[1]))
    return "\n".join(lines) + "\n"


def table_grid(rows):
    """Nested mapping ``{(n_train, n_test): {(arch, repr, stat): value}}``."""
    grid = {}
    for r in rows:
        cell = grid.setdefault((r.n_train, r.n_test), {})
        cell[(r.architecture, r.representation, "max")] = r.max_accuracy
        cell[(r.architecture, r.representation, "mean")] = r.mean_accuracy
    return grid


def plot_baselines(rows, path):
    """Bar chart of the best accuracy per method and representation."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    methods = list(dict.fromkeys(r.architecture for r in rows))
    reprs = [rp for rp in ("scalogram", "spectrogram") if any(r.representation == rp for r in rows)]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / max(len(reprs), 1)
    for j, rp in enumerate(reprs):
        best = [max((r.max_accuracy for r in rows if r.architecture == m and r.representation == rp), default=0)
                for m in methods]
        ax.bar(np.arange(len(methods)) + j * width, best, width, label=REPR_LABELS[rp])
    ax.set_xticks(np.arange(len(methods)) + width * (len(reprs) - 1) / 2)
    ax.set_xticklabels([ARCH_LABELS.get(m, m) for m in methods], rotation=15)
    ax.set_ylabel("best one-shot accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
