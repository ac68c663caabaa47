"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` (or execute this file).
The mechanism check trains 10 desk-scale runs and takes a few minutes.
"""
import csv
import sys
import time

import numpy as np
import pytest

from dualinc.cli import cmd_analyze, cmd_eval, cmd_train, main
from dualinc.config import ExperimentConfig
from dualinc.data import CIFAR_RECORD, ImageSet, OrientationSet, load_cifar100, rotate_bilinear, rotate_quarter
from dualinc.engine import Tensor, global_avg_pool, linear
from dualinc.errors import DataError
from dualinc.evaluator import agreement_analysis, combine, gradcam
from dualinc.model import Model, preset
from dualinc.trainer import Batch, TrainConfig, compute_objective, select_exemplars

from _gradcases import GRAD_CASES, max_grad_error
from _oracles import brute_force_herding, recount_agreement

SEEDS = range(5)


@pytest.fixture
def verdict(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}")
        assert ok, f"{criterion}: {detail}"

    return emit


def test_gradient_correctness(verdict):
    start = time.perf_counter()
    worst = {name: max(max_grad_error(build, seed, h=1e-3) for seed in range(20)) for name, build in GRAD_CASES.items()}
    elapsed = time.perf_counter() - start
    name = max(worst, key=worst.get)
    ok = worst[name] < 1e-4 and elapsed < 60
    verdict(
        "gradient correctness",
        ok,
        f"{len(worst)} ops x 20 shapes, worst relative error {worst[name]:.2e} ({name}), {elapsed:.1f}s",
    )


def test_rotation_exactness(verdict):
    rng = np.random.default_rng(0)
    cycle_fail = quarter_fail = 0
    for _ in range(1000):
        side, ch = int(rng.integers(1, 17)), int(rng.integers(1, 4))
        img = rng.standard_normal((ch, side, side)).astype(np.float32)
        out = img
        for _ in range(4):
            out = rotate_quarter(out, 1)
        cycle_fail += out.tobytes() != img.tobytes()
        for k, angle in enumerate((0, 90, 180, 270)):
            quarter_fail += rotate_bilinear(img, angle).tobytes() != rotate_quarter(img, k).tobytes()
    verdict(
        "rotation exactness",
        cycle_fail == 0 and quarter_fail == 0,
        f"4-cycle mismatches {cycle_fail}/1000, bilinear-vs-quarter mismatches {quarter_fail}/4000",
    )


def test_objective_decomposition(verdict):
    rng = np.random.default_rng(1)
    model = Model(preset("tiny"), 4, 2, seed=0)
    snapshot = model.snapshot()
    model.expand_image_head(2)
    worst = 0.0
    for i in range(100):
        gamma = (0.0, 0.5, 1.0)[i % 3]
        n = int(rng.integers(2, 9))
        batch = Batch(
            rng.random((n, 3, 16, 16)).astype(np.float32),
            rng.integers(0, 6, n),
            rng.random(n) < 0.5,
        )
        t = compute_objective(model, batch, snapshot, TrainConfig(gamma=gamma), mode="train")
        worst = max(worst, abs(t.total.item() - (t.img.item() + t.frgt.item() + gamma * t.orient.item())))
    verdict("total = img + frgt + gamma * or", worst <= 1e-6, f"100 batches, gamma in {{0, 0.5, 1}}, max |diff| {worst:.2e}")


def _unanimous_tuples(rng, count):
    """Random M x K probability rows; half get one class boosted in every row."""
    k = int(rng.integers(2, 21))
    m = int(rng.integers(1, 5))
    probs = rng.dirichlet(np.ones(k) * rng.uniform(0.2, 2.0), size=(m, count))
    boost = rng.random(count) < 0.5
    target = rng.integers(0, k, count)
    probs[:, boost, target[boost]] += rng.uniform(0, 1, (m, boost.sum()))
    return probs / probs.sum(axis=2, keepdims=True)


def test_avg_dominance(verdict):
    rng = np.random.default_rng(2)
    total = checked = violations = 0
    while total < 100_000:
        probs = _unanimous_tuples(rng, 1000)
        top = probs.argmax(axis=2)  # M x N
        strict = ((probs == probs.max(axis=2, keepdims=True)).sum(axis=2) == 1).all(axis=0)
        unanimous = strict & (top == top[0]).all(axis=0)
        pred = combine(probs, "avg")
        violations += int((pred[unanimous] != top[0][unanimous]).sum())
        checked += int(unanimous.sum())
        total += probs.shape[1]

    tables = []
    o = OrientationSet((0, 90))
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        k, n = int(r.integers(2, 11)), 200
        p1, p2 = r.dirichlet(np.ones(k), n), r.dirichlet(np.ones(k), n)
        labels = r.integers(0, k, n)
        stub, imgs = _table_stub(p1, p2, r)
        t = agreement_analysis(stub, ImageSet(imgs, labels), o, 0, 90)
        assert dict(zip(type(t).columns(), t.as_row())) == recount_agreement(p1, p2, labels)
        tables.append(t)
    for seed in range(3):
        m = Model(preset("tiny"), 5, 2, seed=seed)
        r = np.random.default_rng(seed)
        split = ImageSet(r.random((40, 3, 16, 16)).astype(np.float32), r.integers(0, 5, 40))
        tables.append(agreement_analysis(m, split, o, 0, 90))
    bad = sum(t.correct_en_and_both != t.correct_both for t in tables)
    verdict(
        "avg-ensemble dominance",
        violations == 0 and bad == 0,
        f"{total} tuples, {checked} unanimous, {violations} violations; "
        f"EN-and-both != both in {bad}/{len(tables)} fixtures",
    )


class _TableStub:
    def __init__(self):
        self.rows = {}

    def predict_logits(self, images):
        return np.stack([self.rows[np.asarray(x, np.float32).tobytes()] for x in images])


def _table_stub(p1, p2, rng):
    imgs = rng.random((len(p1), 1, 4, 4)).astype(np.float32)
    stub = _TableStub()
    for x, a, b in zip(imgs, p1, p2):
        stub.rows[x.tobytes()] = np.log(a)
        stub.rows[rotate_quarter(x, 1).tobytes()] = np.log(b)
    return stub, imgs


def test_herding_oracle(verdict):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(500):
        n, d, m = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        f = rng.standard_normal((n, d))
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        mismatches += select_exemplars(f, m, "herding") != brute_force_herding(f, m)
    verdict("herding oracle equivalence", mismatches == 0, f"{mismatches}/500 mismatches")


# -- desk-scale mechanism check ---------------------------------------------------------


def _desk_config(root, objective, strategy, seed):
    return ExperimentConfig(
        dataset="synthetic",
        total_classes=8,
        base_classes=4,
        phases=2,
        orientations="0,90",
        memory=20,
        preset="small",
        epochs=20,
        objective=objective,
        strategy=strategy,
        seed=seed,
        output_dir=str(root / f"{objective}-seed{seed}"),
    )


@pytest.fixture(scope="module")
def mechanism_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("mechanism")
    results = []
    for seed in SEEDS:
        t0 = time.perf_counter()
        dilf_run = cmd_train(_desk_config(root, "dilf", "avg", seed))
        t_dilf = time.perf_counter() - t0
        t0 = time.perf_counter()
        plain_run = cmd_train(_desk_config(root, "plain", "none", seed))
        t_plain = time.perf_counter() - t0
        results.append(
            {
                "seed": seed,
                "dilf_run": dilf_run,
                "dilf_en": cmd_eval(dilf_run, {"strategy": "avg"}).average_incremental_accuracy,
                "dilf_none": cmd_eval(dilf_run, {"strategy": "none"}).average_incremental_accuracy,
                "plain_none": cmd_eval(plain_run, {"strategy": "none"}).average_incremental_accuracy,
                "plain_en": cmd_eval(
                    plain_run, {"strategy": "avg", "allow_plain_ensemble": True}
                ).average_incremental_accuracy,
                "runtime": max(t_dilf, t_plain),
                "tables": _tables(dilf_run) + _tables(plain_run) + [tuple(cmd_analyze(dilf_run, 0, 90).as_row())],
            }
        )
    return results


def _tables(run):
    """Agreement rows as 7-tuples; index 2 is correct_both, index 6 correct_en_and_both."""
    path = run / "agreement.csv"
    with open(path, newline="") as fh:
        return [tuple(int(v) for v in row.values()) for row in csv.DictReader(fh)]


def test_mechanism_check(verdict, mechanism_runs):
    lines = []
    for r in mechanism_runs:
        lines.append(
            f"seed {r['seed']}: DILF+EN {r['dilf_en']:.4f} vs DILF {r['dilf_none']:.4f}; "
            f"plain+EN {r['plain_en']:.4f} vs plain {r['plain_none']:.4f}; slowest run {r['runtime']:.0f}s"
        )
    a = sum(r["dilf_en"] >= r["dilf_none"] for r in mechanism_runs)
    b = sum(r["plain_en"] < r["plain_none"] for r in mechanism_runs)
    tables = [t for r in mechanism_runs for t in r["tables"]]
    c = sum(t[6] == t[2] for t in tables)
    slowest = max(r["runtime"] for r in mechanism_runs)
    ok = a >= 4 and b >= 4 and c == len(tables) and slowest <= 15 * 60
    detail = (
        f"(a) EN >= no-EN for DILF in {a}/5 seeds; (b) EN < no-EN for plain in {b}/5 seeds; "
        f"(c) EN-and-both = both in {c}/{len(tables)} tables; slowest run {slowest:.0f}s\n    "
        + "\n    ".join(lines)
    )
    verdict("desk-scale mechanism check", ok, detail)


def test_determinism(verdict, mechanism_runs, tmp_path):
    first = mechanism_runs[0]["dilf_run"]
    again = cmd_train(_desk_config(tmp_path, "dilf", "avg", 0))
    same_report = (first / "report.csv").read_bytes() == (again / "report.csv").read_bytes()
    same_ckpt = all(
        (first / "checkpoints" / f"phase_{p}.ckpt").read_bytes() == (again / "checkpoints" / f"phase_{p}.ckpt").read_bytes()
        for p in range(3)
    )
    verdict(
        "determinism",
        same_report,
        f"summary CSV byte-identical: {same_report}; checkpoints byte-identical: {same_ckpt}",
    )


def test_cifar_loader(verdict, tmp_path):
    rng = np.random.default_rng(4)
    records = [(int(rng.integers(0, 20)), int(rng.integers(0, 100)), rng.integers(0, 256, 3072, dtype=np.uint8))
               for _ in range(3)]
    blob = b"".join(bytes([c, f]) + px.tobytes() for c, f, px in records)
    (tmp_path / "fixture.bin").write_bytes(blob)
    loaded = load_cifar100(tmp_path / "fixture.bin")
    labels_ok = loaded.labels.tolist() == [f for _, f, _ in records]
    recovered = np.rint(loaded.images * 255).astype(np.uint8).reshape(3, 3072)
    pixels_ok = all(recovered[i].tobytes() == records[i][2].tobytes() for i in range(3))
    pixel_count = recovered.size

    (tmp_path / "train.bin").write_bytes(blob[: 2 * CIFAR_RECORD + 100])
    (tmp_path / "test.bin").write_bytes(blob)
    try:
        load_cifar100(tmp_path / "train.bin")
        raised = False
    except DataError:
        raised = True
    code = main(
        ["train", "--dataset", "cifar100", "--cifar-path", str(tmp_path), "--output-dir", str(tmp_path / "run")]
    )
    verdict(
        "CIFAR-100 loader",
        labels_ok and pixels_ok and pixel_count == 9216 and raised and code == 2,
        f"labels ok {labels_ok}, {pixel_count} pixel bytes ok {pixels_ok}, truncated -> DataError {raised}, exit code {code}",
    )


class _LinearStub:
    def __init__(self, fmap, weight):
        self.fmap, self.weight = fmap, weight

    def features(self, images, mode):
        return Tensor(self.fmap[None])

    def image_logits(self, feats):
        return linear(global_avg_pool(feats), Tensor(self.weight), Tensor(np.zeros(self.weight.shape[1])))


def test_gradcam_closed_form(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(50):
        fmap = rng.standard_normal((2, 2, 2))
        weight = rng.standard_normal((2, 3))
        k = int(rng.integers(0, 3))
        raw = np.maximum((weight[:, k] / 4) @ fmap.reshape(2, 4), 0).reshape(2, 2)
        if raw.max() > raw.min():
            expected = (raw - raw.min()) / (raw.max() - raw.min())
        else:
            expected = np.ones_like(raw) if raw.max() > 0 else np.zeros_like(raw)
        heat = gradcam(_LinearStub(fmap, weight), np.zeros((1, 2, 2)), k)
        worst = max(worst, float(np.abs(heat - expected).max()))
    verdict("Grad-CAM closed form", worst <= 1e-5, f"50 random 2-channel 2x2 linear stubs, max |diff| {worst:.2e}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
