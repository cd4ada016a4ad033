"""Command-line entry points.

Subcommands: gen-synthetic, train, encode, eval, report, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every run echoes its fully resolved configuration (stdout, plus config.txt
in the output directory when one exists). Config files are flat key=value
text; command-line flags override file values.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import backend
from .dataset import (
    FileFeatureSource,
    load_manifest,
    read_feature_file,
    synthetic_encoder,
    write_synthetic_dataset,
)
from .errors import DataError, NumericError
from .evaluation import (
    QueryTruth,
    distance_report,
    hit_rate,
    mean_average_precision,
    render_per_query_dump,
    render_report,
    top_percent_k,
    topk_accuracy,
)
from .gradcheck import PASS_THRESHOLD, gradient_check_report, report_passes
from .index import load_store, save_store, search_batch
from .loss import LossConfig
from .mixer import MixerConfig, read_mixer_stream
from .sampling import DssConfig
from .trainer import (
    STRATEGIES,
    TrainConfig,
    Trainer,
    checkpoint_save,
    encode_all,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to 1."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="cvmix", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="write a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=640)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--h", type=int, default=8)
    g.add_argument("--w", type=int, default=8)
    g.add_argument("--d-channels", type=int, default=32)
    g.add_argument("--sigma", type=float, default=0.1)

    t = sub.add_parser("train", help="train the aggregation head")
    t.add_argument("--manifest", required=True)
    t.add_argument("--features", required=True)
    t.add_argument("--config", help="key=value config file; flags override")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--nns-epochs", type=int)
    t.add_argument("--dss-refresh-steps", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--eval-fraction", type=float)
    t.add_argument("--label-smoothing", type=float)
    t.add_argument("--temperature-mode", choices=["fixed", "learnable"])
    t.add_argument("--tau", type=float)
    t.add_argument("--pool-size", type=int)
    t.add_argument("--batch-quota", type=int)
    t.add_argument("--blocks", type=int)
    t.add_argument("--hidden-dim", type=int)
    t.add_argument("--out-depth", type=int)
    t.add_argument("--out-rows", type=int)
    t.add_argument("--no-biases", action="store_true")
    t.add_argument("--dump-plans", action="store_true")
    t.add_argument("--threads", type=int)

    e = sub.add_parser("encode", help="write descriptor files for a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--features", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--threads", type=int)

    v = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    v.add_argument("--manifest", required=True)
    v.add_argument("--features", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--k-list", default="1,5,10")
    v.add_argument("--report", help="report file path")
    v.add_argument("--dump", help="per-query dump file path")
    v.add_argument("--threads", type=int)

    r = sub.add_parser("report", help="retrieval metrics from descriptor files")
    r.add_argument("--manifest", required=True)
    r.add_argument("--ground-descriptors", required=True)
    r.add_argument("--sat-descriptors", required=True)
    r.add_argument("--k-list", default="1,5,10")
    r.add_argument("--report", help="report file path")
    r.add_argument("--dump", help="per-query dump file path")

    c = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    c.add_argument("--config", help="key=value config file; flags override")
    c.add_argument("--seed", type=int)
    c.add_argument("--num-maps", type=int)
    c.add_argument("--h", type=int)
    c.add_argument("--w", type=int)
    c.add_argument("--hidden-dim", type=int)
    c.add_argument("--blocks", type=int)
    c.add_argument("--out-depth", type=int)
    c.add_argument("--out-rows", type=int)
    c.add_argument("--batch-size", type=int)
    c.add_argument("--threads", type=int)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    return p


def _load_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _resolver(args, file_cfg: dict[str, str]):
    """Value lookup with precedence: explicit flag > config file > default."""

    def res(key: str, default, cast):
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            return flag_val
        if key in file_cfg:
            raw = file_cfg[key]
            if cast is bool:
                return raw.lower() in ("1", "true", "yes")
            return cast(raw)
        return default

    return res


def _echo_config(pairs: list[tuple[str, object]], out_dir: Path | None) -> None:
    text = "\n".join(f"{k}={v}" for k, v in pairs) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(text)


def _echo_config_err(pairs: list[tuple[str, object]]) -> None:
    """Resolved-config log for report-style commands whose stdout is the
    metrics stream."""
    sys.stderr.write("\n".join(f"{k}={v}" for k, v in pairs) + "\n")


def cmd_gen_synthetic(args) -> int:
    if args.pairs < 2:
        raise UsageError("--pairs must be >= 2")
    if args.sigma < 0:
        raise UsageError("--sigma must be >= 0")
    out = Path(args.out)
    data = synthetic_encoder(
        seed=args.seed, pair_count=args.pairs, h=args.h, w=args.w,
        depth=args.d_channels, noise_sigma=args.sigma,
    )
    manifest_path = write_synthetic_dataset(out, data)
    _echo_config([
        ("command", "gen-synthetic"), ("out", out), ("pairs", args.pairs),
        ("seed", args.seed), ("h", args.h), ("w", args.w),
        ("d_channels", args.d_channels), ("sigma", args.sigma),
    ], out)
    print(f"wrote {manifest_path} and {2 * args.pairs} feature files")
    return EXIT_OK


def _train_config(args, grid) -> TrainConfig:
    file_cfg = _load_config_file(args.config) if args.config else {}
    res = _resolver(args, file_cfg)
    h, w, depth = grid
    mixer = MixerConfig(
        num_maps=depth,
        map_height=h,
        map_width=w,
        num_blocks=res("blocks", 2, int),
        hidden_dim=res("hidden_dim", 0, int),
        out_depth=res("out_depth", 64, int),
        out_rows=res("out_rows", 4, int),
        use_biases=not getattr(args, "no_biases", False),
    )
    loss = LossConfig(
        temperature_mode=res("temperature_mode", "learnable", str),
        tau=res("tau", 0.1, float),
        label_smoothing=res("label_smoothing", 0.1, float),
    )
    dss = DssConfig(
        pool_size=res("pool_size", 128, int),
        batch_quota=res("batch_quota", 64, int),
    )
    return TrainConfig(
        mixer=mixer,
        epochs=res("epochs", 40, int),
        batch_size=res("batch_size", 32, int),
        base_lr=res("lr", 0.001, float),
        momentum=res("momentum", 0.0, float),
        loss=loss,
        dss=dss,
        strategy=res("strategy", "nns_dss", str),
        nns_epochs=res("nns_epochs", 1, int),
        dss_refresh_steps=res("dss_refresh_steps", 0, int),
        eval_every=res("eval_every", 5, int),
        eval_fraction=res("eval_fraction", 0.2, float),
        seed=res("seed", 0, int),
        checkpoint_dir=args.out,
        dump_plans=getattr(args, "dump_plans", False),
    )


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    if not manifest.records:
        raise DataError(f"{args.manifest}: empty manifest")
    source = FileFeatureSource(args.features)
    first = read_feature_file(
        Path(args.features) / manifest.records[0].ground_ref
    )
    try:
        cfg = _train_config(args, (first.h, first.w, first.depth))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    _echo_config(
        [("command", "train"), ("manifest", args.manifest),
         ("features", args.features)]
        + [tuple(kv.split("=", 1)) for kv in cfg.echo().strip().splitlines()],
        out,
    )
    trainer = Trainer(manifest, source, cfg)
    state = trainer.run()
    checkpoint_save(state, out / "final.ckpt")
    (out / "history.txt").write_text("\n".join(state.history) + "\n")
    if state.best_top1 is not None:
        print(f"best holdout top1 {state.best_top1:.6f} at epoch {state.best_epoch}")
    print(f"finished {state.epoch} epochs, {state.global_step} steps")
    return EXIT_OK


def _load_head(path):
    with open(path, "rb") as fh:
        return read_mixer_stream(fh)


def cmd_encode(args) -> int:
    manifest = load_manifest(args.manifest)
    source = FileFeatureSource(args.features)
    mixer_cfg, params = _load_head(args.checkpoint)
    ground, satellite = encode_all(manifest, source, params, mixer_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_store(out / "ground.cvds", ground)
    save_store(out / "satellite.cvds", satellite)
    _echo_config([
        ("command", "encode"), ("manifest", args.manifest),
        ("checkpoint", args.checkpoint), ("records", len(manifest.records)),
        ("descriptor_dim", mixer_cfg.descriptor_len),
    ], out)
    print(f"wrote {out}/ground.cvds and {out}/satellite.cvds")
    return EXIT_OK


def _metrics_from_stores(manifest, ground, satellite, k_list, report_path, dump_path):
    by_id = manifest.by_id()
    if len(ground) == 0:
        raise DataError("no descriptors to evaluate")
    truth = {}
    ref_coords = {}
    for rec in manifest.records:
        covering = frozenset(rec.covering_ids) | {rec.id} if rec.covering_ids \
            else frozenset([rec.id])
        truth[rec.id] = QueryTruth(
            relevant_ids=frozenset([rec.id]),
            covering_ids=covering,
            truth_point=rec.point,
        )
        ref_coords[rec.id] = rec.point
    missing = [i for i in ground.ids if i not in by_id]
    if missing:
        raise DataError(f"descriptor ids {missing[:5]} not in manifest")

    n_refs = len(satellite)
    ranked = search_batch(satellite, ground.matrix(), n_refs, query_ids=ground.ids)
    ks = sorted({int(k) for k in k_list})
    metrics = {}
    for k in ks:
        if k > n_refs:
            raise UsageError(f"k={k} exceeds reference count {n_refs}")
        metrics[f"top{k}"] = topk_accuracy(ranked, truth, k)
    metrics["top1pct"] = topk_accuracy(ranked, truth, top_percent_k(n_refs))
    metrics["ap"] = mean_average_precision(ranked, truth)
    metrics["hit_rate"] = hit_rate(ranked, truth)
    dist = distance_report(ranked, truth, ref_coords)
    text = render_report(
        metrics, dist, counts={"queries": len(ground), "references": n_refs}
    )
    sys.stdout.write(text)
    if report_path:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        Path(report_path).write_text(text)
    if dump_path:
        Path(dump_path).parent.mkdir(parents=True, exist_ok=True)
        Path(dump_path).write_text(render_per_query_dump(dist))
    return EXIT_OK


def _parse_k_list(raw: str) -> list[int]:
    try:
        ks = [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --k-list {raw!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"bad --k-list {raw!r}")
    return ks


def cmd_eval(args) -> int:
    _echo_config_err([
        ("command", "eval"), ("manifest", args.manifest),
        ("features", args.features), ("checkpoint", args.checkpoint),
        ("k_list", args.k_list), ("report", args.report or "-"),
        ("dump", args.dump or "-"),
    ])
    manifest = load_manifest(args.manifest)
    source = FileFeatureSource(args.features)
    mixer_cfg, params = _load_head(args.checkpoint)
    ground, satellite = encode_all(manifest, source, params, mixer_cfg)
    return _metrics_from_stores(
        manifest, ground, satellite, _parse_k_list(args.k_list),
        args.report, args.dump,
    )


def cmd_report(args) -> int:
    _echo_config_err([
        ("command", "report"), ("manifest", args.manifest),
        ("ground_descriptors", args.ground_descriptors),
        ("sat_descriptors", args.sat_descriptors),
        ("k_list", args.k_list), ("report", args.report or "-"),
        ("dump", args.dump or "-"),
    ])
    manifest = load_manifest(args.manifest)
    ground = load_store(args.ground_descriptors)
    satellite = load_store(args.sat_descriptors)
    return _metrics_from_stores(
        manifest, ground, satellite, _parse_k_list(args.k_list),
        args.report, args.dump,
    )


def cmd_gradcheck(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    res = _resolver(args, file_cfg)
    try:
        mixer_cfg = MixerConfig(
            num_maps=res("num_maps", 8, int),
            map_height=res("h", 4, int),
            map_width=res("w", 4, int),
            num_blocks=res("blocks", 2, int),
            hidden_dim=res("hidden_dim", 16, int),
            out_depth=res("out_depth", 4, int),
            out_rows=res("out_rows", 4, int),
        )
        batch_size = res("batch_size", 4, int)
        seed = res("seed", 0, int)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if mixer_cfg.num_maps * mixer_cfg.n > 10**4:
        raise UsageError("gradcheck config too large (num_maps * n must be <= 1e4)")
    _echo_config_err([
        ("command", "gradcheck"), ("num_maps", mixer_cfg.num_maps),
        ("h", mixer_cfg.map_height), ("w", mixer_cfg.map_width),
        ("hidden_dim", mixer_cfg.hidden), ("blocks", mixer_cfg.num_blocks),
        ("out_depth", mixer_cfg.out_depth), ("out_rows", mixer_cfg.out_rows),
        ("batch_size", batch_size), ("seed", seed),
    ])
    report = gradient_check_report(
        mixer_cfg, batch_size=batch_size, seed=seed, corrupt=args.corrupt
    )
    width = max(len(name) for name, _ in report)
    for name, err in report:
        status = "PASS" if err < PASS_THRESHOLD else "FAIL"
        print(f"{name:<{width}}  max_rel_err={err:.3e}  {status}")
    if not report_passes(report):
        print(f"gradient check FAILED (threshold {PASS_THRESHOLD:g})")
        return EXIT_NUMERIC
    print(f"gradient check passed (threshold {PASS_THRESHOLD:g})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        threads = getattr(args, "threads", None)
        if threads is not None:
            backend.set_num_threads(threads)
        handler = {
            "gen-synthetic": cmd_gen_synthetic,
            "train": cmd_train,
            "encode": cmd_encode,
            "eval": cmd_eval,
            "report": cmd_report,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"data error: missing file {exc.filename}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
