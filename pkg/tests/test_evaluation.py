"""One-shot tasks, baselines, the repeated-run protocol and reports."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalosiam.audio import DatasetManifest
from scalosiam.episodes import ClassSplit, split_classes
from scalosiam.evaluation import (
    EvalRow,
    Exemplar,
    OneShotTask,
    ProtocolError,
    evaluate_baselines,
    evaluate_tasks,
    generate_tasks,
    nearest_neighbor_baseline,
    one_shot_trial,
    plot_baselines,
    protocol_max_mean,
    random_baseline,
    read_csv,
    report_table,
    rows_from_csv,
    rows_to_csv,
    run_evaluation,
    table_grid,
    write_csv,
)


class LabelStub:
    """Pair model whose probability is 1 exactly when hidden labels agree."""

    def __init__(self, labels):
        self.labels = labels

    def predict_pair(self, a, b):
        return type("P", (), {"p": float(self.labels[id(a)] == self.labels[id(b)])})()


class RandomStub:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def predict_pair(self, a, b):
        return type("P", (), {"p": float(self.rng.random())})()


def manifest_and_images(n_classes=6, per_class=5, seed=0, size=8):
    classes = [f"k{i}" for i in range(n_classes)]
    entries = {c: [f"{c}/{j}" for j in range(per_class)] for c in classes}
    m = DatasetManifest(classes, entries, per_class)
    rng = np.random.default_rng(seed)
    images = {}
    for ci, c in enumerate(classes):
        proto = rng.random((size, size))
        for p in entries[c]:
            img = proto + 0.3 * rng.random((size, size))
            images[p] = np.repeat(img[..., None], 3, axis=2)
    return m, images


def all_test_split(m):
    return ClassSplit((), tuple(m.classes))


class TestTrial:
    def test_singleton_support(self):
        e = Exemplar("a", "x", np.zeros((2, 2, 3)))
        task = OneShotTask((e,), Exemplar("a", "y", np.ones((2, 2, 3))))
        assert one_shot_trial(RandomStub(0), task) == 0

    def test_ties_go_to_lowest_index(self):
        task = OneShotTask(
            (Exemplar("a", "1", None), Exemplar("b", "2", None), Exemplar("c", "3", None)),
            Exemplar("b", "4", None),
        )
        assert one_shot_trial(None, task, scores=[0.2, 0.9, 0.9]) == 1
        assert one_shot_trial(None, task, scores=[0.5, 0.5, 0.5]) == 0

    def test_empty_support(self):
        with pytest.raises(ValueError):
            one_shot_trial(None, OneShotTask((), Exemplar("a", "q", None)))

    def test_duplicate_support_class_rejected(self):
        with pytest.raises(ValueError):
            OneShotTask((Exemplar("a", "1", None), Exemplar("a", "2", None)), Exemplar("a", "3", None))

    @settings(max_examples=50, deadline=None)
    @given(scores=st.lists(st.floats(0, 1), min_size=1, max_size=8), power=st.floats(0.1, 5))
    def test_argmax_invariant_under_monotone_maps(self, scores, power):
        task = OneShotTask(
            tuple(Exemplar(str(i), str(i), None) for i in range(len(scores))),
            Exemplar("0", "q", None),
        )
        s = np.array(scores)
        base = one_shot_trial(None, task, scores=s)
        for f in (lambda v: v ** power, lambda v: np.log1p(v), lambda v: 3 * v - 7, np.exp):
            assert one_shot_trial(None, task, scores=f(s)) == base


class TestTasks:
    def test_query_discipline(self):
        m, images = manifest_and_images()
        split = split_classes(m, 2, 0)
        tasks = generate_tasks(m, split, images, 3, 300, np.random.default_rng(1))
        for t in tasks:
            labels = [s.label for s in t.support]
            assert len(set(labels)) == 3
            assert labels == sorted(labels, key=m.classes.index)
            assert all(l in split.test_classes for l in labels)
            assert t.query.key != t.support[t.answer].key

    def test_perfect_stub_scores_one(self):
        m, images = manifest_and_images()
        labels = {id(images[p]): m.label_of(p) for p in m.all_paths()}
        acc = run_evaluation(LabelStub(labels), m, all_test_split(m), images, 2, 500, np.random.default_rng(0))
        assert acc == 1.0

    def test_random_stub_near_half(self):
        m, images = manifest_and_images()
        acc = run_evaluation(RandomStub(3), m, all_test_split(m), images, 2, 10_000, np.random.default_rng(0))
        assert abs(acc - 0.5) <= 0.015

    def test_seeded_sequence(self):
        m, images = manifest_and_images()
        split = all_test_split(m)
        a = generate_tasks(m, split, images, 2, 50, np.random.default_rng(4))
        b = generate_tasks(m, split, images, 2, 50, np.random.default_rng(4))
        assert [(t.query.key, [s.key for s in t.support]) for t in a] == \
               [(t.query.key, [s.key for s in t.support]) for t in b]

    def test_too_few_test_classes(self):
        m, images = manifest_and_images(n_classes=3)
        with pytest.raises(ValueError):
            generate_tasks(m, split_classes(m, 2, 0), images, 2, 1, np.random.default_rng(0))

    def test_class_with_one_image(self):
        m, images = manifest_and_images(per_class=1)
        with pytest.raises(ValueError):
            generate_tasks(m, all_test_split(m), images, 2, 1, np.random.default_rng(0))


class TestBaselines:
    def test_nn_identical_query(self):
        rng = np.random.default_rng(0)
        imgs = [rng.random((4, 4, 3)) for _ in range(3)]
        task = OneShotTask(tuple(Exemplar(str(i), str(i), im) for i, im in enumerate(imgs)),
                           Exemplar("2", "q", imgs[2].copy()))
        assert nearest_neighbor_baseline(task) == 2

    def test_nn_zeros_vs_ones(self):
        z, o = np.zeros((4, 4, 3)), np.ones((4, 4, 3))
        task = OneShotTask((Exemplar("ones", "1", o), Exemplar("zeros", "0", z)), Exemplar("zeros", "q", z.copy()))
        assert nearest_neighbor_baseline(task) == 1

    def test_nn_beats_chance_four_way(self):
        m, images = manifest_and_images(n_classes=6, per_class=6)
        tasks = generate_tasks(m, all_test_split(m), images, 4, 2000, np.random.default_rng(0))
        assert evaluate_baselines(tasks, np.random.default_rng(1))["nearest_neighbor"] > 0.25

    def test_random_single_way(self):
        rng = np.random.default_rng(0)
        assert all(random_baseline(1, rng) == 0 for _ in range(20))

    @pytest.mark.parametrize("n_way", [2, 3, 5])
    def test_random_converges(self, n_way):
        rng = np.random.default_rng(n_way)
        n = 20_000
        hits = sum(random_baseline(n_way, rng) == 0 for _ in range(n))
        p = 1 / n_way
        assert abs(hits / n - p) <= 3 * np.sqrt(p * (1 - p) / n)

    def test_random_seeded(self):
        a = [random_baseline(5, np.random.default_rng(7)) for _ in range(3)]
        assert len(set(a)) == 1

    def test_random_rejects_zero_way(self):
        with pytest.raises(ValueError):
            random_baseline(0, np.random.default_rng(0))


class TestProtocol:
    def test_single_repetition(self):
        assert protocol_max_mean(lambda i, s: 0.6, 1) == (0.6, 0.6)

    def test_constant(self):
        assert protocol_max_mean(lambda i, s: 0.7, 10) == (0.7, 0.7)

    def test_arithmetic(self):
        vals = [0.6, 0.8, 0.7]
        best, mean = protocol_max_mean(lambda i, s: vals[i], 3)
        assert best == 0.8 and mean == pytest.approx(0.7, abs=1e-15)

    def test_distinct_seeds(self):
        seen = []
        protocol_max_mean(lambda i, s: seen.append(s) or 0.5, 10, seed=3)
        assert len(set(seen)) == 10

    def test_failure_names_repetition(self):
        def runner(i, s):
            if i == 2:
                raise RuntimeError("boom")
            return 0.5

        with pytest.raises(ProtocolError, match="repetition 2"):
            protocol_max_mean(runner, 4)

    def test_record_keeps_dicts(self):
        rec = []
        protocol_max_mean(lambda i, s: {"accuracy": 0.5, "i": i}, 2, record=rec)
        assert [r["i"] for r in rec] == [0, 1]


class TestReport:
    def rows(self):
        return [
            EvalRow(12, 2, "scalogram", "conv", 0.92, 0.78, 10, 400),
            EvalRow(12, 2, "spectrogram", "conv", 0.8, 0.7, 10, 400),
            EvalRow(8, 6, "scalogram", "residual", 0.96, 0.94, 10, 400),
        ]

    def test_mean_above_max_rejected(self):
        with pytest.raises(ValueError):
            EvalRow(2, 2, "scalogram", "conv", 0.5, 0.6, 1, 10)

    def test_csv_round_trip(self, tmp_path):
        rows = self.rows() + [EvalRow(5, 9, "scalogram", "conv", 1 / 3, 0.1 + 0.2, 3, 400)]
        assert rows_from_csv(rows_to_csv(rows)) == rows
        write_csv(tmp_path / "e.csv", rows)
        assert read_csv(tmp_path / "e.csv") == rows
        assert (tmp_path / "e.csv").read_text().splitlines()[0] == \
            "n_train,n_test,architecture,representation,runs,trials,max_acc,mean_acc"

    def test_table_cells(self):
        text = report_table(self.rows())
        assert "Scalogram" in text and "Spectogram" in text
        line = next(l for l in text.splitlines() if l.strip().startswith("12"))
        cells = line.split("|")
        assert "92%" in cells[2] and "78%" in cells[2]
        assert cells[2].index("92%") < cells[2].index("78%")
        grid = table_grid(self.rows())
        assert grid[(12, 2)][("conv", "scalogram", "max")] == 0.92

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            report_table([])

    def test_plot(self, tmp_path):
        plot_baselines(self.rows(), tmp_path / "p.png")
        assert (tmp_path / "p.png").read_bytes()[:4] == b"\x89PNG"


class TestSiameseScoring:
    def test_cached_embedding_matches_pairwise(self):
        from oracles import desk_model

        model = desk_model("conv", 0, dtype=np.float64)
        m, _ = manifest_and_images(n_classes=3, per_class=3)
        rng = np.random.default_rng(0)
        images = {p: rng.random(model.input_shape) for p in m.all_paths()}
        tasks = generate_tasks(m, all_test_split(m), images, 3, 20, np.random.default_rng(1))
        fast = evaluate_tasks(model, tasks)
        slow = sum(one_shot_trial(model, t) == t.answer for t in tasks) / len(tasks)
        assert fast == slow
