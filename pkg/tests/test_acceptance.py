"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest tests/test_acceptance.py -s` to see them).

Tolerances are pinned here and nowhere else. The toy-scale convergence runs
use the synthetic paired dataset; full-scale accuracy figures are out of
scope by design.
"""

import math
import time

import numpy as np
import pytest

from cvmix.cli import main
from cvmix.dataset import ArrayFeatureSource, synthetic_encoder
from cvmix.evaluation import QueryTruth, average_precision, hit_rate, topk_accuracy
from cvmix.index import RankedList
from cvmix.loss import LossConfig
from cvmix.mixer import (
    MixerConfig,
    feature_transform,
    init_params,
    inverse_feature_transform,
    mixer_forward,
)
from cvmix.numerics import SgdConfig, cosine_lr
from cvmix.sampling import DssConfig, GeoPoint, dss_batch, haversine, nns_neighbors
from cvmix.trainer import TrainConfig, Trainer

TOY_MIXER = MixerConfig(num_maps=32, map_height=8, map_width=8, num_blocks=2,
                        out_depth=16, out_rows=4)


def _toy_cfg(strategy="nns_dss", seed=7):
    return TrainConfig(
        mixer=TOY_MIXER, epochs=20, batch_size=32, base_lr=0.001, momentum=0.9,
        strategy=strategy, nns_epochs=1, eval_every=5, eval_fraction=0.2,
        seed=seed,
    )


@pytest.fixture(scope="module")
def toy_data():
    # 640 pairs -> 512 train + 128 held-out under the 80/20 split
    data = synthetic_encoder(seed=42, pair_count=640, h=8, w=8, depth=32,
                             noise_sigma=0.1)
    return data, ArrayFeatureSource.from_synthetic(data)


@pytest.fixture(scope="module")
def toy_results(toy_data):
    """Held-out metrics per sampling strategy, identical budgets."""
    data, src = toy_data
    out = {}
    for strategy in ("nns_dss", "dss", "random"):
        t0 = time.perf_counter()
        trainer = Trainer(data.manifest, src, _toy_cfg(strategy))
        state = trainer.run()
        metrics = trainer.evaluate_holdout(state)
        metrics["runtime_s"] = time.perf_counter() - t0
        out[strategy] = metrics
    return out


def report(name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {name}: {status}{suffix}")
    assert ok, f"{name}{suffix}"


class TestAcceptance:
    def test_gradient_correctness(self, capsys):
        # config s=8, n=16, hidden=16, d=4, r=4, L=2, B=4; every tensor, both
        # descriptor gradients, learnable tau; < 1e-4; < 30 s single-threaded
        from cvmix.gradcheck import gradient_check_report
        cfg = MixerConfig(num_maps=8, map_height=4, map_width=4, num_blocks=2,
                          hidden_dim=16, out_depth=4, out_rows=4)
        t0 = time.perf_counter()
        rep = gradient_check_report(cfg, batch_size=4, seed=0)
        elapsed = time.perf_counter() - t0
        rc = main(["gradcheck", "--threads", "1"])
        capsys.readouterr()
        worst = max(err for _, err in rep)
        with capsys.disabled():
            report(
                "gradient-correctness",
                rc == 0 and worst < 1e-4 and elapsed < 30.0,
                f"max_rel_err={worst:.2e}, {elapsed:.1f}s, exit={rc}",
            )

    def test_descriptor_contract(self, capsys):
        cfg = MixerConfig(num_maps=8, map_height=4, map_width=4, num_blocks=2,
                          hidden_dim=16, out_depth=4, out_rows=4)
        rng = np.random.default_rng(1)
        worst = 0.0
        params = init_params(cfg, seed=0)
        for i in range(10_000):
            if i % 500 == 0:
                params = init_params(cfg, seed=i)
            desc = mixer_forward(rng.normal(size=(16, 8)), params, cfg)
            worst = max(worst, abs(float(np.linalg.norm(desc)) - 1.0))
        tokens = rng.normal(size=(16, 8))
        round_trip = inverse_feature_transform(feature_transform(tokens, cfg), cfg)
        exact = bool(np.array_equal(round_trip, tokens))
        with capsys.disabled():
            report("descriptor-contract", worst <= 1e-6 and exact,
                   f"worst_norm_dev={worst:.2e}, transform_bit_exact={exact}")

    def test_sampling_oracles(self, capsys):
        rng = np.random.default_rng(2)
        pts = [GeoPoint.wgs84(float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)))
               for _ in range(500)]

        def brute_force(q, count):
            dists = []
            for i, p in enumerate(pts):
                if i == q:
                    continue
                phi1, phi2 = math.radians(pts[q].lat), math.radians(p.lat)
                dphi = math.radians(p.lat - pts[q].lat)
                dlam = math.radians(p.lon - pts[q].lon)
                a = (math.sin(dphi / 2) ** 2
                     + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2)
                dists.append((2 * 6_371_000.0 * math.asin(math.sqrt(a)), i))
            return [i for _, i in sorted(dists)[:count]]

        nns_ok = all(
            nns_neighbors(pts, q, 16) == brute_force(q, 16) for q in range(500)
        )

        cfg = DssConfig(pool_size=128, batch_quota=64, rng_seed=3)
        dss_ok = True
        for anchor in range(0, 500, 50):
            row = [int(i) for i in rng.permutation(500)]  # ranked candidate ids
            batch = dss_batch(row, cfg)
            dss_ok &= batch[:32] == row[:32]
            dss_ok &= set(batch[32:]) <= set(row[32:128])
            dss_ok &= len(set(batch)) == 64
        with capsys.disabled():
            report("sampling-oracles", bool(nns_ok and dss_ok),
                   f"nns={nns_ok}, dss={dss_ok}")

    def test_metric_oracles(self, capsys):
        rng = np.random.default_rng(4)
        worst = 0.0
        closed_form_ok = True
        monotone_ok = True
        hit_ge_top1 = True
        for _ in range(100):
            n_refs = int(rng.integers(10, 201))
            n_q = int(rng.integers(3, 12))
            ranked, truth = [], {}
            for q in range(n_q):
                ids = [int(i) for i in rng.permutation(n_refs)]
                rel = int(rng.choice(ids))
                cover = frozenset({rel} | {int(i) for i in rng.choice(n_refs, 2)})
                ranked.append(RankedList(
                    query_id=q,
                    entries=[(i, 1.0 - r / n_refs) for r, i in enumerate(ids)],
                ))
                truth[q] = QueryTruth(relevant_ids=frozenset([rel]),
                                      covering_ids=cover)
            ks = sorted(set(int(k) for k in rng.integers(1, n_refs + 1, size=4)))
            prev = 0.0
            for k in ks:
                got = topk_accuracy(ranked, truth, k)
                brute = sum(
                    any(e in truth[rl.query_id].relevant_ids
                        for e, _ in rl.entries[:k])
                    for rl in ranked
                ) / n_q
                worst = max(worst, abs(got - brute))
                monotone_ok &= got >= prev - 1e-15
                prev = got
            for rl in ranked:
                rel_ids = truth[rl.query_id].relevant_ids
                ap = average_precision(rl, rel_ids)
                rank = next(i for i, (e, _) in enumerate(rl.entries, 1)
                            if e in rel_ids)
                closed_form_ok &= abs(ap - 1.0 / rank) < 1e-12
            hr = hit_rate(ranked, truth)
            brute_hr = sum(rl.entries[0][0] in truth[rl.query_id].covering_ids
                           for rl in ranked) / n_q
            worst = max(worst, abs(hr - brute_hr))
            hit_ge_top1 &= hr >= topk_accuracy(ranked, truth, 1) - 1e-15
        ok = worst < 1e-12 and closed_form_ok and monotone_ok and hit_ge_top1
        with capsys.disabled():
            report("metric-oracles", bool(ok),
                   f"worst_abs_err={worst:.2e}, ap_closed_form={closed_form_ok}")

    def test_haversine(self, capsys):
        d = haversine(GeoPoint.wgs84(0.0, 0.0), GeoPoint.wgs84(0.0, 1.0))
        anchor_ok = abs(d - 111_194.93) <= 0.01
        rng = np.random.default_rng(5)
        sym_ok = ident_ok = True
        for _ in range(10_000):
            a = GeoPoint.wgs84(float(rng.uniform(-90, 90)),
                               float(rng.uniform(-179.99, 180)))
            b = GeoPoint.wgs84(float(rng.uniform(-90, 90)),
                               float(rng.uniform(-179.99, 180)))
            dab, dba = haversine(a, b), haversine(b, a)
            sym_ok &= abs(dab - dba) <= 1e-9 and dab >= 0.0
            ident_ok &= haversine(a, a) == 0.0
        with capsys.disabled():
            report("haversine", bool(anchor_ok and sym_ok and ident_ok),
                   f"1deg={d:.2f}m")

    def test_toy_convergence(self, toy_results, capsys):
        m = toy_results["nns_dss"]
        ok = m["top1"] >= 0.95 and m["top5"] >= 0.99 and m["runtime_s"] < 300.0
        with capsys.disabled():
            report("toy-convergence", bool(ok),
                   f"top1={m['top1']:.4f}, top5={m['top5']:.4f}, "
                   f"runtime={m['runtime_s']:.0f}s")

    def test_strategy_ordering(self, toy_results, capsys):
        tol = 0.01  # ties allowed within one percentage point
        t = {k: v["top1"] for k, v in toy_results.items()}
        ok = (t["nns_dss"] >= t["dss"] - tol) and (t["dss"] >= t["random"] - tol)
        with capsys.disabled():
            report("strategy-ordering", bool(ok),
                   f"nns_dss={t['nns_dss']:.4f} >= dss={t['dss']:.4f} "
                   f">= random={t['random']:.4f} (1pp ties)")

    def test_determinism(self, tmp_path_factory, capsys):
        # two full toy training runs, same seed, plus a thread-count variation
        base = tmp_path_factory.mktemp("determinism")
        ds = base / "ds"
        rc = main(["gen-synthetic", "--out", str(ds), "--pairs", "640",
                   "--seed", "42", "--h", "8", "--w", "8", "--d-channels", "32"])
        assert rc == 0
        flags = ["--manifest", str(ds / "manifest.tsv"), "--features", str(ds),
                 "--epochs", "20", "--batch-size", "32", "--lr", "0.001",
                 "--momentum", "0.9", "--out-depth", "16", "--out-rows", "4",
                 "--eval-every", "5", "--seed", "13"]
        runs = {}
        for name, threads in (("a", "1"), ("b", "1"), ("c", "4")):
            out = base / name
            rc = main(["train", *flags, "--out", str(out), "--threads", threads])
            assert rc == 0
            runs[name] = (
                (out / "final.ckpt").read_bytes(),
                (out / "history.txt").read_bytes(),
            )
        capsys.readouterr()
        same_seed = runs["a"] == runs["b"]
        thread_free = runs["a"] == runs["c"]
        with capsys.disabled():
            report("determinism", bool(same_seed and thread_free),
                   f"repeat_identical={same_seed}, threads_identical={thread_free}")

    def test_schedule(self, capsys):
        cfg = SgdConfig(base_lr=0.001, total_steps=640, warmup_steps=16)
        ok = (
            cosine_lr(0, cfg) == 0.0
            and cosine_lr(cfg.warmup_steps, cfg) == cfg.base_lr
            and abs(cosine_lr(cfg.total_steps, cfg)) < 1e-9 * cfg.base_lr
        )
        with capsys.disabled():
            report("schedule", bool(ok))
