"""Acceptance criteria.

Each test prints one PASS/FAIL line (visible with -s / -v). The expensive
artifacts (the default synthetic dataset, the ablation grid runs, the
end-to-end pretraining run) are session fixtures shared across criteria.

Paper-scale absolute accuracies are out of reach by design; these are
property checks plus direction-level reproductions on synthetic data.
"""

import hashlib
import math
import time

import numpy as np
import pytest

from imuclr.data import SyntheticSpec, gen_synthetic, load_dataset, save_dataset
from imuclr.encoder import EncoderConfig, init_encoder, param_count
from imuclr.errors import CorruptDatasetError
from imuclr.evaluation import few_shot_eval
from imuclr.experiments import ExperimentGrid, GridPoint, run_ablation
from imuclr.feature_queue import FeatureQueue, QueueEntry
from imuclr.nn_ops import info_nce
from imuclr.seeding import make_rng
from imuclr.tensor import Tensor
from imuclr.training import TrainConfig, pretrain
from imuclr.verification import gradcheck_terms

pytestmark = pytest.mark.acceptance

# Ablation runs use a reduced encoder (the criteria pin the dataset, not the
# encoder size) so seven pretrainings stay tractable on a laptop CPU. Queue
# settings are the package defaults.
ABLATION_ENCODER = EncoderConfig(
    conv_channels=(16, 32, 64), kernel=7, gn_groups=4,
    gru_hidden=96, gru_layers=1, head_hidden=96, embed_dim=64,
)
ABLATION_CONFIG = dict(batch_size=64, epochs=16, lr=1e-3, seed=0,
                       encoder=ABLATION_ENCODER, queue_capacity=4096,
                       queue_min=128)
FULL_NAME = "ss+mm+nn"


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def default_dataset():
    return gen_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def ablation_outcomes(default_dataset):
    grid = ExperimentGrid(points=[
        GridPoint("ss", 1, 0, 0),
        GridPoint("mm", 0, 1, 0),
        GridPoint("ss+mm", 1, 1, 0),
        GridPoint("ss+nn", 1, 0, 1),
        GridPoint("mm+nn", 0, 1, 1),
        GridPoint(FULL_NAME, 1, 1, 1),
        GridPoint(FULL_NAME + "@0.1", 1, 1, 1, aligned_fraction=0.1),
    ], shots=[100], trials=5)
    outcomes = run_ablation(default_dataset, grid,
                            TrainConfig(**ABLATION_CONFIG), eval_seed=0)
    by_name = {}
    for oc in outcomes:
        assert oc.error is None, f"grid point {oc.point.name} failed: {oc.error}"
        by_name[oc.point.name] = oc
    return by_name


def _mean_stderr(outcome):
    rep = outcome.reports[0]
    return rep.mean, rep.stderr


class TestCriterion1Gradients:
    def test_gradcheck_all_terms(self):
        t0 = time.time()
        results = gradcheck_terms(("ss", "mm", "nn", "combined"), seed=0, eps=1e-5)
        elapsed = time.time() - t0
        worst = max(results.values())
        ok = worst < 1e-4 and elapsed < 60.0
        report("1 gradient-correctness", ok,
               f"worst rel err {worst:.2e}, {elapsed:.1f}s; " +
               ", ".join(f"{k}={v:.1e}" for k, v in results.items()))
        assert worst < 1e-4
        assert elapsed < 60.0


class TestCriterion2InfoNceBounds:
    def test_bounds_over_1000_batches(self):
        rng = np.random.default_rng(2024)
        worst_violation = 0.0
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            d = int(rng.integers(4, 32))
            batch = rng.normal(size=(n, d))
            batch /= np.linalg.norm(batch, axis=1, keepdims=True)
            log_tau = float(rng.uniform(math.log(0.01), math.log(1.0)))
            val = info_nce(Tensor(batch), Tensor(batch),
                           Tensor(np.array(log_tau))).item()
            worst_violation = max(worst_violation, -val, val - math.log(n))
        # constant batches hit the log-n ceiling exactly
        const_err = 0.0
        for n in (2, 7, 64):
            row = rng.normal(size=(1, 8))
            row /= np.linalg.norm(row)
            batch = Tensor(np.tile(row, (n, 1)))
            val = info_nce(batch, batch, Tensor(np.array(0.0))).item()
            const_err = max(const_err, abs(val - math.log(n)))
        single = Tensor(row)
        zero = info_nce(single, single, Tensor(np.array(0.0))).item()
        ok = worst_violation <= 1e-9 and const_err < 1e-9 and zero == 0.0
        report("2 infonce-bounds", ok,
               f"worst bound violation {worst_violation:.1e}, "
               f"constant-batch err {const_err:.1e}, n=1 -> {zero}")
        assert worst_violation <= 1e-9
        assert const_err < 1e-9
        assert zero == 0.0


class TestCriterion3QueueOracle:
    def test_retrieval_matches_oracle(self):
        rng = make_rng(3, "acceptance-queue")
        d = 16
        failures = 0
        for trial in range(100):
            size = int(rng.integers(1, 257))
            q = FeatureQueue(256, d)
            vecs = rng.normal(size=(size, d))
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            if trial % 7 == 0 and size >= 2:
                vecs[1] = vecs[0]  # force a tie
            q.push_batch([QueueEntry(z_m=v, z_v=v, z_t=None, insert_step=i)
                          for i, v in enumerate(vecs)])
            query = rng.normal(size=d)
            query /= np.linalg.norm(query)
            idx, sim = q.nearest_by_video(query)
            sims = vecs @ query
            if idx != int(np.argmax(sims)) or abs(sim - sims.max()) > 1e-12:
                failures += 1
        report("3a queue-retrieval-oracle", failures == 0,
               f"{100 - failures}/100 trials matched")
        assert failures == 0

    def test_fifo_replay_after_10k_pushes(self):
        rng = make_rng(4, "acceptance-fifo")
        d = 8
        q = FeatureQueue(64, d)
        mirror = []
        step = 0
        while step < 10_000:
            burst = int(rng.integers(1, 9))
            entries = []
            for _ in range(burst):
                v = rng.normal(size=d)
                v /= np.linalg.norm(v)
                entries.append(QueueEntry(z_m=v, z_v=v, z_t=None, insert_step=step))
                mirror.append(step)
                step += 1
            q.push_batch(entries)
        got = [e.insert_step for e in q.entries()]
        ok = got == mirror[-64:]
        report("3b queue-fifo-replay", ok, f"{step} pushes, final 64 match: {ok}")
        assert ok


@pytest.fixture(scope="session")
def end_to_end_run(default_dataset):
    """Criterion 4's pretraining: default backbone (embed matched to the
    dataset), 20 epochs, full objective."""
    encoder = EncoderConfig(embed_dim=default_dataset.embed_dim)
    cfg = TrainConfig(batch_size=64, epochs=20, lr=1e-4, seed=0,
                      encoder=encoder, queue_capacity=4096, queue_min=128)
    t0 = time.time()
    result = pretrain(default_dataset, cfg)
    return result, encoder, time.time() - t0


class TestCriterion4LearningSignal:
    def test_pretrained_beats_random_baseline(self, default_dataset, end_to_end_run):
        result, encoder, train_time = end_to_end_run
        t0 = time.time()
        pre = few_shot_eval(result.params, default_dataset, [10], trials=5,
                            base_seed=0)[0]
        baseline_params = init_encoder(encoder, make_rng(0, "init"))
        rand = few_shot_eval(baseline_params, default_dataset, [10], trials=5,
                             base_seed=0)[0]
        total_time = train_time + (time.time() - t0)
        gap = pre.mean - rand.mean
        ok = gap >= 0.15 and total_time < 900
        report("4 learning-signal", ok,
               f"pretrained {pre.mean:.3f}+/-{pre.stderr:.3f} vs random "
               f"{rand.mean:.3f}+/-{rand.stderr:.3f}, gap {gap:+.3f} "
               f"(need >= +0.15), {total_time:.0f}s (budget 900s)")
        assert gap >= 0.15
        assert total_time < 900

    def test_training_loss_decreased(self, end_to_end_run):
        result, _, _ = end_to_end_run
        steps = len(result.log) // 20
        first = float(np.mean([r["total"] for r in result.log[:steps]]))
        last = float(np.mean([r["total"] for r in result.log[-steps:]]))
        report("4b loss-decrease", last < first, f"{first:.3f} -> {last:.3f}")
        assert last < first


class TestCriterion5AblationDirection:
    def test_mm_terms_beat_ss_only(self, ablation_outcomes):
        ss_mean, ss_se = _mean_stderr(ablation_outcomes["ss"])
        details = []
        ok = True
        for name in ("mm", "mm+nn", FULL_NAME):
            mean, se = _mean_stderr(ablation_outcomes[name])
            margin = mean - ss_mean
            sig = margin > 2.0 * math.sqrt(se**2 + ss_se**2)
            details.append(f"{name}: {margin:+.3f} ({'sig' if sig else 'NOT sig'})")
            ok = ok and margin >= 0.05 and sig
        report("5a mm-beats-ss", ok,
               f"ss={ss_mean:.3f}; " + ", ".join(details) + "; need >= +0.05 & >2 stderr")
        assert ok

    def test_ss_nn_flagged_or_lowest(self, ablation_outcomes):
        ssnn = ablation_outcomes["ss+nn"]
        ssnn_mean, _ = _mean_stderr(ssnn)
        multi = {name: _mean_stderr(ablation_outcomes[name])[0]
                 for name in ("ss+mm", "mm+nn", FULL_NAME)}
        flagged = ssnn.diagnostic is not None and ssnn.diagnostic.collapsed
        lowest = ssnn_mean <= min(multi.values())
        ok = flagged or lowest
        report("5b ss+nn-flagged-or-lowest", ok,
               f"ss+nn={ssnn_mean:.3f}, collapsed={flagged}, "
               f"others={ {k: round(v, 3) for k, v in multi.items()} }")
        assert ok


class TestCriterion6DataEfficiency:
    def test_fraction_point_one(self, ablation_outcomes):
        ss_mean, ss_se = _mean_stderr(ablation_outcomes["ss"])
        frac_mean, frac_se = _mean_stderr(ablation_outcomes[FULL_NAME + "@0.1"])
        full_mean, full_se = _mean_stderr(ablation_outcomes[FULL_NAME])
        beats_ss = frac_mean - ss_mean >= 0.05
        close_to_full = full_mean - frac_mean <= 0.05
        ok = beats_ss and close_to_full
        report("6 data-efficiency", ok,
               f"frac0.1 {frac_mean:.3f}+/-{frac_se:.3f} vs ss {ss_mean:.3f}"
               f"+/-{ss_se:.3f} (margin {frac_mean - ss_mean:+.3f}, need >= +0.05); "
               f"full {full_mean:.3f}+/-{full_se:.3f} "
               f"(gap {full_mean - frac_mean:+.3f}, need <= +0.05)")
        assert beats_ss
        assert close_to_full


class TestCriterion7ParamBudget:
    def test_default_count(self):
        cfg = EncoderConfig()
        params = init_encoder(cfg, make_rng(0))
        count = param_count(params)

        # independent closed-form recount
        expected = 0
        c_in = cfg.in_channels
        for c_out in cfg.conv_channels:
            expected += c_out * c_in * cfg.kernel + c_out + 2 * c_out
            c_in = c_out
        d = cfg.conv_channels[-1]
        for _ in range(cfg.gru_layers):
            expected += 3 * cfg.gru_hidden * (d + cfg.gru_hidden + 1)
            d = cfg.gru_hidden
        expected += 2 * (cfg.gru_hidden * cfg.head_hidden + cfg.head_hidden
                         + cfg.head_hidden * cfg.embed_dim + cfg.embed_dim)

        ok = count == expected and 1_100_000 <= count <= 1_700_000
        report("7 param-budget", ok,
               f"count {count:,} == closed-form {expected:,}, in [1.1M, 1.7M]")
        assert count == expected
        assert 1_100_000 <= count <= 1_700_000


class TestCriterion8Determinism:
    def test_bit_identical_checkpoints_and_resume(self, tmp_path):
        ds = gen_synthetic(SyntheticSpec(
            n_classes=4, segments_per_class=48, T=60, embed_dim=16, seed=11,
        ))
        encoder = EncoderConfig(conv_channels=(8, 16), kernel=5, gn_groups=4,
                                gru_hidden=16, gru_layers=1, head_hidden=16,
                                embed_dim=16)

        def cfg(epochs):
            return TrainConfig(batch_size=16, epochs=epochs, lr=1e-3, seed=5,
                               encoder=encoder, queue_capacity=64, queue_min=16)

        paths = [tmp_path / "a.ckpt", tmp_path / "b.ckpt"]
        logs = []
        for path in paths:
            logs.append(pretrain(ds, cfg(4), checkpoint_path=str(path)).log)
        digests = [hashlib.sha256(p.read_bytes()).hexdigest() for p in paths]
        identical = digests[0] == digests[1] and logs[0] == logs[1]

        half_path = tmp_path / "half.ckpt"
        half = pretrain(ds, cfg(2), checkpoint_path=str(half_path))
        resumed = pretrain(ds, cfg(4), resume_from=str(half_path))
        tail = [r["total"] for r in logs[0][len(half.log):]]
        resume_exact = [r["total"] for r in resumed.log] == tail

        ok = identical and resume_exact
        report("8 determinism-checkpointing", ok,
               f"identical checkpoints: {identical}, resume bit-exact: {resume_exact}")
        assert identical
        assert resume_exact


class TestCriterion9DatasetRoundTrip:
    def test_fifty_random_round_trips_and_crc(self, tmp_path):
        rng = make_rng(9, "acceptance-roundtrip")
        bad = 0
        crc_misses = 0
        for trial in range(50):
            coarse = int(rng.integers(1, 3))
            spec = SyntheticSpec(
                n_classes=int(rng.integers(1, 4)) * coarse,
                segments_per_class=int(rng.integers(4, 16)),
                T=int(rng.integers(8, 40)),
                embed_dim=int(rng.integers(8, 24)),
                imu_noise=float(rng.uniform(0.0, 1.0)),
                video_noise=float(rng.uniform(0.0, 0.3)),
                text_noise=float(rng.uniform(0.0, 0.3)),
                text_coarseness=coarse,
                seed=int(rng.integers(0, 10_000)),
            )
            ds = gen_synthetic(spec)
            root = tmp_path / f"ds{trial}"
            save_dataset(ds, str(root))
            back = load_dataset(str(root))
            if not (np.allclose(back.imu, ds.imu, atol=1e-5)
                    and np.allclose(back.video_emb, ds.video_emb, atol=1e-6)
                    and np.array_equal(back.labels, ds.labels)
                    and back.train_range == ds.train_range):
                bad += 1
                continue
            # inject one corrupting bit flip into a random blob
            blob = root / ["imu.bin", "video.bin", "text.bin", "labels.bin"][
                int(rng.integers(0, 4))]
            raw = bytearray(blob.read_bytes())
            raw[int(rng.integers(0, len(raw)))] ^= 0xA5
            blob.write_bytes(bytes(raw))
            try:
                load_dataset(str(root))
                crc_misses += 1
            except CorruptDatasetError:
                pass
        ok = bad == 0 and crc_misses == 0
        report("9 dataset-round-trip", ok,
               f"50 round trips, {bad} mismatches, {crc_misses} undetected faults")
        assert bad == 0
        assert crc_misses == 0
