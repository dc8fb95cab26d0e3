"""Acceptance suite: one test per criterion, each at its pinned tolerance.

The image campaigns run on a 4000/1000 MNIST-shaped task. If real MNIST
IDX files are available (SADNET_DATA_DIR or ./data/mnist), a stratified
subset of them is used; otherwise the deterministic synthetic task
stands in at identical sizes, so the suite needs no downloads. Every
test prints one pass/fail line, mirrored into acceptance_report.txt.

Run with:  pytest tests/test_acceptance.py -v -s
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from sadnet.data import (LabeledDataset, build_corrupted_train, corrupt_labels,
                         load_idx, subset)
from sadnet.errors import FormatError
from sadnet.experiment import (TrainConfig, checkpoint_of, clean_gradient_norm,
                               construct_sad_point, escape_run, evaluate,
                               load_checkpoint, new_model, save_checkpoint, train)
from sadnet.fixtures import MNIST_NAMES, synth_blobs, synth_images
from sadnet.gradcheck import gradcheck_suite
from sadnet.nn import build_mlp, cross_entropy, init_xavier_uniform

SEEDS = (1, 2, 3, 4, 5)
TRAIN_N, TEST_N = 4000, 1000
SAD_EPOCHS = 48        # fixed budget, well under the 200-epoch cap
BASELINE_EPOCHS = 30
ESCAPE_EPOCHS = 50
L2_LAMBDA = 1e-4
DATA_SEED = 0

REPORT_PATH = Path(__file__).resolve().parent.parent / "acceptance_report.txt"


def report(num: int, ok: bool, detail: str):
    line = f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    with REPORT_PATH.open("a") as fh:
        fh.write(line + "\n")
    assert ok, line


@pytest.fixture(scope="session", autouse=True)
def fresh_report():
    REPORT_PATH.write_text("")


def _mnist_dir() -> Path | None:
    candidates = []
    if os.environ.get("SADNET_DATA_DIR"):
        candidates.append(Path(os.environ["SADNET_DATA_DIR"]))
    candidates.append(Path(__file__).resolve().parent.parent / "data" / "mnist")
    for base in candidates:
        for suffix in ("", ".gz"):
            if (base / (MNIST_NAMES["train_images"] + suffix)).exists():
                return base
    return None


@pytest.fixture(scope="session")
def datasets():
    """(train, test, source_label) at 4000/1000."""
    base = _mnist_dir()
    if base is not None:
        def pick(images_key, labels_key):
            for suffix in ("", ".gz"):
                images = base / (MNIST_NAMES[images_key] + suffix)
                labels = base / (MNIST_NAMES[labels_key] + suffix)
                if images.exists() and labels.exists():
                    return images, labels
            raise FileNotFoundError(images_key)
        rng = np.random.default_rng((DATA_SEED, 808))
        full_train = load_idx(*pick("train_images", "train_labels"), class_count=10)
        full_test = load_idx(*pick("test_images", "test_labels"), class_count=10)
        train_ds = subset(full_train, TRAIN_N, rng, stratified=True)
        test_ds = subset(full_test, TEST_N, rng, stratified=True)
        label = "mnist"
    else:
        train_ds, test_ds = synth_images(TRAIN_N, TEST_N, data_seed=DATA_SEED)
        label = "synth (no MNIST files found; same sizes, same thresholds)"
    print(f"\nacceptance dataset: {label}")
    return train_ds, test_ds, label


@pytest.fixture(scope="session")
def sad_campaign(datasets):
    """Five deep sad-point runs; also reconstructs each run's init weights."""
    train_ds, test_ds, _ = datasets
    runs = {}
    for seed in SEEDS:
        cfg = TrainConfig(epochs=SAD_EPOCHS, seed=seed, dataset="acceptance")
        cp, rec = construct_sad_point(train_ds, test_ds, cfg, default_stop=None)
        init_cp = checkpoint_of(new_model(cfg, train_ds), cfg, "init")
        runs[seed] = {"sad": cp, "record": rec, "init": init_cp, "config": cfg}
        last = rec.rows[-1]
        print(f"  sad seed {seed}: train {last.train_acc:.4f} test {last.test_acc:.4f} "
              f"epochs {last.epoch}")
    return runs


@pytest.fixture(scope="session")
def clean_campaign(datasets, sad_campaign):
    """Paired clean runs, one per seed, at the sad runs' exact epoch counts."""
    train_ds, test_ds, _ = datasets
    runs = {}
    for seed in SEEDS:
        epochs = sad_campaign[seed]["record"].rows[-1].epoch
        cfg = TrainConfig(epochs=epochs, seed=seed, dataset="acceptance")
        model = new_model(cfg, train_ds)
        cp, rec = train(model, train_ds, train_ds, test_ds, cfg)
        runs[seed] = {"clean": cp, "record": rec}
    return runs


class TestGradientAndInit:
    def test_criterion_1_gradient_correctness(self):
        start = time.perf_counter()
        worst, details = gradcheck_suite(seed=2026, n_models=20)
        elapsed = time.perf_counter() - start
        ok = worst < 1e-6 and elapsed < 60.0
        report(1, ok, f"20-model finite-difference suite, max rel err {worst:.3e} "
                      f"(< 1e-6), {elapsed:.1f}s (< 60s)")

    def test_criterion_2_init_loss(self, datasets):
        train_ds, _, _ = datasets
        rng = np.random.default_rng((DATA_SEED, 909))
        balanced = subset(train_ds, 100, rng, stratified=True)
        x = balanced.images.reshape(100, -1)
        deviations = []
        for seed in range(10):
            model = build_mlp(x.shape[1], 512, 10)
            init_xavier_uniform(model, np.random.default_rng((seed, 101)))
            loss = cross_entropy(model.forward(x), balanced.labels)
            deviations.append(abs(loss.mean_loss - math.log(10)) / math.log(10))
        worst = max(deviations)
        report(2, worst < 0.15,
               f"Xavier init loss within {worst:.3%} of ln 10 across 10 seeds (< 15%)")


class TestCampaigns:
    def test_criterion_3_clean_baseline(self, datasets):
        train_ds, test_ds, _ = datasets
        cfg = TrainConfig(epochs=BASELINE_EPOCHS, seed=SEEDS[0], dataset="acceptance")
        model = new_model(cfg, train_ds)
        _, rec = train(model, train_ds, train_ds, test_ds, cfg)
        acc = rec.rows[-1].test_acc
        report(3, acc >= 0.92,
               f"clean MLP baseline test accuracy {acc:.4f} after "
               f"{BASELINE_EPOCHS} epochs (>= 0.92)")

    def test_criterion_4_sad_points(self, sad_campaign):
        hits = 0
        details = []
        for seed in SEEDS:
            last = sad_campaign[seed]["record"].rows[-1]
            good = last.train_acc >= 0.99 and last.test_acc <= 0.15
            hits += good
            details.append(f"s{seed}: {last.train_acc:.3f}/{last.test_acc:.3f}")
        report(4, hits >= 4,
               f"sad points (train>=0.99, test<=0.15) on {hits}/5 seeds "
               f"[{', '.join(details)}] within {SAD_EPOCHS} <= 200 epochs")

    def test_criterion_5_l2_does_not_prevent(self, datasets):
        # under weight decay the fully memorized state shows rare one-epoch
        # avalanche dips, so these runs use the default saturation stop
        # (corrupted-train acc >= 0.995) inside the 200-epoch cap
        train_ds, test_ds, _ = datasets
        hits = 0
        details = []
        for seed in SEEDS:
            cfg = TrainConfig(epochs=200, seed=seed, l2_lambda=L2_LAMBDA,
                              dataset="acceptance")
            _, rec = construct_sad_point(train_ds, test_ds, cfg)
            last = rec.rows[-1]
            good = last.train_acc >= 0.99 and last.test_acc <= 0.15
            hits += good
            details.append(f"s{seed}: {last.train_acc:.3f}/{last.test_acc:.3f} "
                           f"@ep{last.epoch}")
        report(5, hits >= 4,
               f"l2 {L2_LAMBDA} still yields sad points on {hits}/5 seeds "
               f"[{', '.join(details)}]")

    def test_criterion_6_distance_from_init(self, sad_campaign, clean_campaign):
        sad_d = [sad_campaign[s]["record"].rows[-1].dist_from_init for s in SEEDS]
        clean_d = [clean_campaign[s]["record"].rows[-1].dist_from_init for s in SEEDS]
        mean_sad, mean_clean = float(np.mean(sad_d)), float(np.mean(clean_d))
        report(6, mean_sad > mean_clean,
               f"mean dist from init: sad {mean_sad:.2f} > clean {mean_clean:.2f} "
               f"at equal epochs (ratio {mean_sad / mean_clean:.2f})")

    def test_criterion_7_clean_surface_near_criticality(self, datasets, sad_campaign):
        train_ds, _, _ = datasets
        ratios = []
        for seed in SEEDS:
            g_sad = clean_gradient_norm(sad_campaign[seed]["sad"], train_ds)
            g_init = clean_gradient_norm(sad_campaign[seed]["init"], train_ds)
            ratios.append(g_sad / g_init)
        worst = max(ratios)
        report(7, worst < 0.05,
               "clean-train gradient norm ratio sad/init per seed "
               f"[{', '.join(f'{r:.4f}' for r in ratios)}], worst {worst:.4f} (< 0.05)")

    def test_criterion_8_escape(self, datasets, sad_campaign):
        train_ds, test_ds, _ = datasets
        hits = 0
        details = []
        for seed in SEEDS:
            cfg = TrainConfig(epochs=ESCAPE_EPOCHS, seed=seed, dataset="acceptance")
            _, rec = escape_run(sad_campaign[seed]["sad"], train_ds, test_ds, cfg)
            best = max(r.test_acc for r in rec.rows)
            hits += best >= 0.90
            details.append(f"s{seed}: {best:.3f}")
        report(8, hits >= 4,
               f"escape reaches test acc >= 0.90 within {ESCAPE_EPOCHS} epochs on "
               f"{hits}/5 seeds [{', '.join(details)}]")


class TestProperties:
    def test_criterion_9_corruption_properties(self, datasets):
        rng = np.random.default_rng(2027)
        cases = 0
        while cases < 10_000:
            k = int(rng.integers(2, 13))
            n = int(rng.integers(1, 500))
            labels = rng.integers(0, k, size=n)
            ds = LabeledDataset(np.zeros((n, 1, 1, 1)), labels, k)
            out = corrupt_labels(ds, rng)
            assert (out.labels != labels).all()
            assert (out.labels < k).all() and (out.labels >= 0).all()
            cases += n

        for _ in range(50):
            train_n = int(rng.integers(10, 400))
            test_n = int(rng.integers(1, train_n + 1))
            train_ds = LabeledDataset(np.zeros((train_n, 1, 1, 1)),
                                      rng.integers(0, 4, train_n), 4)
            test_ds = LabeledDataset(np.zeros((test_n, 1, 1, 1)),
                                     rng.integers(0, 4, test_n), 4)
            ctest = corrupt_labels(test_ds, rng)
            merged = build_corrupted_train(train_ds, ctest)
            t = train_n // test_n + 1
            assert len(merged) == train_n + t * test_n

        # weighted decomposition: corrupted-train accuracy splits exactly
        # into the train prefix and the t corrupted-test copies
        blob_train = synth_blobs(60, k=2, dim=32, seed=0)
        blob_test = synth_blobs(25, k=2, dim=32, seed=1)
        ctest = corrupt_labels(blob_test, rng)
        merged = build_corrupted_train(blob_train, ctest)
        cfg = TrainConfig(epochs=4, seed=3, hidden=32, batch_size=16)
        model = new_model(cfg, blob_train)
        train(model, merged, blob_train, blob_test, cfg)
        t = 60 // 25 + 1
        _, acc_total = evaluate(model, merged)
        _, acc_train = evaluate(model, blob_train)
        _, acc_ctest = evaluate(model, ctest)
        lhs = acc_total * len(merged)
        rhs = acc_train * 60 + t * acc_ctest * 25
        assert lhs == pytest.approx(rhs, abs=1e-9)
        report(9, True,
               f"{cases} corruption cases with no fixed points; size formula over "
               f"50 splits; weighted accuracy decomposition exact")

    def test_criterion_10_persistence(self, tmp_path):
        train_ds = synth_blobs(40, k=3, dim=16, seed=5)
        test_ds = synth_blobs(20, k=3, dim=16, seed=6)
        cfg = TrainConfig(epochs=2, seed=9, hidden=24, batch_size=16)

        model = new_model(cfg, train_ds)
        cp, rec1 = train(model, train_ds, train_ds, test_ds, cfg, out_dir=tmp_path / "a")
        loaded = load_checkpoint(tmp_path / "a" / rec1.run_id / "clean.ckpt")
        bit_identical = all(np.array_equal(a, b) for a, b in zip(loaded.params, cp.params))

        path = save_checkpoint(cp, tmp_path / "probe.ckpt")
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x40
        path.write_bytes(bytes(raw))
        try:
            load_checkpoint(path)
            corruption_detected = False
        except FormatError:
            corruption_detected = True

        model2 = new_model(cfg, train_ds)
        _, rec2 = train(model2, train_ds, train_ds, test_ds, cfg, out_dir=tmp_path / "b")
        payloads_match = rec1.deterministic_payload() == rec2.deterministic_payload()

        report(10, bit_identical and corruption_detected and payloads_match,
               f"checkpoint round-trip bit-identical: {bit_identical}; "
               f"single-byte corruption detected: {corruption_detected}; "
               f"identical seeds give identical JSONL payloads: {payloads_match}")
