"""``ecg-soup`` command-line entry point.

Exit codes: 0 success, 2 configuration/usage error, 3 I/O error, 4 fold
leak between splits, 5 numeric failure (NaN/Inf).
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .aggregate import (
    METRICS_COLUMNS,
    SWEEP_COLUMNS,
    AggregationMode,
    DownstreamConfig,
    compute_summaries,
    finetune_train,
    layerwise_probe_sweep,
    probe_train,
    read_activation_cache,
    write_activation_cache,
    write_rows,
)
from .backbone import LEAD_NAMES, VitEncoder, load_encoder
from .config import RunConfig, load_config, write_resolved
from .data.folds import kfold_split
from .data.metrics import METRIC_NAMES
from .data.records import read_dataset
from .data.synth import synth_generate
from .errors import ConfigError, FoldLeakError, InputError, NumericError, UsageError
from .numcore import precision
from .pretrain import pretrain_loop
from .report import summarize, write_report
from .svg import heatmap_svg, line_chart_svg, write_svg

log = logging.getLogger("ecgsoup")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_LEAK, EXIT_NUMERIC = 0, 2, 3, 4, 5
LOCK_NAME = ".ecgsoup.lock"


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="ecg-soup", description="Masked ECG transformer pretraining and layer aggregation.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="JSON run configuration")
        sp.add_argument("--out", help="output directory (overrides the config)")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic 12-lead dataset"))
    sp = common(sub.add_parser("pretrain", help="masked-reconstruction pretraining"))
    sp.add_argument("--mode", choices=["stmem", "ipastmem"])
    sp.add_argument("--resume", help="checkpoint to continue from")
    for name in ("probe", "finetune"):
        sp = common(sub.add_parser(name, help=f"{name} a classifier over folds and seeds"))
        sp.add_argument("--agg", help="last, ppa, pma or layer:<k>")
        sp.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds, e.g. 0,1,2")
        sp.add_argument("--freeze-gate-uniform", action="store_true", help="PMA with a fixed uniform gate")
        if name == "probe":
            sp.add_argument("--sweep-layers", action="store_true", help="probe every single layer")
    sp = common(sub.add_parser("analyze", help="similarity, entropy and contraction diagnostics"))
    sp.add_argument("--query-lead", choices=[n for n in LEAD_NAMES] + [n.lower() for n in LEAD_NAMES])
    sp.add_argument("--query-patch", type=int)
    sp = common(sub.add_parser("report", help="merge metric CSVs into tables"), config_required=False)
    sp.add_argument("runs", nargs="*", help="run directories or metrics.csv files")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _out_dir(args, config: RunConfig, default):
    out = args.out or config.out or default
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    return Path(out)


@contextlib.contextmanager
def _locked(out_dir: Path):
    from filelock import FileLock, Timeout

    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / LOCK_NAME), timeout=0)
    try:
        lock.acquire()
    except Timeout as exc:
        raise OSError(f"{out_dir} is in use by another ecg-soup process") from exc
    try:
        yield
    finally:
        lock.release()
        with contextlib.suppress(OSError):
            (out_dir / LOCK_NAME).unlink()


def _thread_limit():
    value = os.environ.get("ECGSOUP_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError as exc:
        raise ConfigError(f"ECGSOUP_THREADS must be a positive integer, got {value!r}") from exc
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _require(path, what):
    if not path:
        raise ConfigError(f"the config does not name a {what}")
    return path


def _load_data(config):
    return read_dataset(_require(config.data, "dataset directory ('data')"))


def _load_encoder(config):
    with precision(config.dtype):
        if config.checkpoint:
            encoder, _ = load_encoder(config.checkpoint)
        else:
            log.warning("no checkpoint given; using an untrained encoder")
            encoder = VitEncoder(config.model, np.random.default_rng(config.seed))
    encoder.eval()
    return encoder


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, config: RunConfig):
    out = _out_dir(args, config, None)
    spec = copy.deepcopy(config.synth)
    if args.seed is not None:
        spec.seed = args.seed
    config.synth = spec
    with _locked(out):
        records = synth_generate(spec, config.count, out)
        write_resolved(config, out)
    print(f"wrote {len(records)} records to {out}")


def cmd_pretrain(args, config: RunConfig):
    out = _out_dir(args, config, None)
    pre = copy.deepcopy(config.pretrain)
    if args.mode:
        pre.mode = args.mode
    if args.seed is not None:
        pre.seed = args.seed
    config.pretrain = pre
    data = _load_data(config)
    with _locked(out):
        write_resolved(config, out)
        with precision(config.dtype):
            result = pretrain_loop(pre, data.signals.astype(config.dtype), config.model, config.decoder, out,
                                   resume=args.resume,
                                   progress=lambda r: log.info("epoch %d loss %.6f", r["epoch"], r["loss"]))
    print(f"final loss {result.losses[-1]:.6f}; checkpoint {result.checkpoint}")


def _eval_settings(args, config):
    ev = copy.deepcopy(config.evaluation)
    if getattr(args, "agg", None):
        ev.agg = args.agg
    if getattr(args, "seeds", None):
        ev.seeds = args.seeds
    elif args.seed is not None:
        ev.seeds = [args.seed]
    if getattr(args, "sweep_layers", False):
        ev.sweep_layers = True
    if getattr(args, "freeze_gate_uniform", False):
        ev.freeze_gate_uniform = True
    ev.__post_init__()
    config.evaluation = ev
    return ev


def _splits(data, ev):
    split = kfold_split(data.ids, ev.folds, ev.split_seed)
    for fold in ev.test_folds:
        yield fold, split.designate(fold)


def _summaries(config, encoder, data, out):
    """Frozen-encoder summaries, reusing the on-disk activation cache when valid."""
    path = out / "activations.act"
    key = {"checkpoint": str(config.checkpoint), "data": str(config.data), "precision": config.precision}
    if config.evaluation.cache_activations and path.exists():
        ids, summaries, meta = read_activation_cache(path)
        if meta.get("key") == key and ids == data.ids:
            return summaries
    with precision(config.dtype):
        summaries = compute_summaries(encoder, data.signals.astype(config.dtype))
    if config.evaluation.cache_activations:
        write_activation_cache(path, data.ids, summaries, {"key": key})
    return summaries


def _mode_label(kind, ev, depth):
    agg = str(AggregationMode.parse(ev.agg, depth))
    if ev.freeze_gate_uniform:
        agg += "-uniform"
    return f"{kind}-{agg}"


def _downstream(config, kind, seed):
    ds = copy.deepcopy(config.downstream)
    d = ds.to_dict()
    d.update(mode="finetune" if kind == "finetune" else "linear_probe", seed=seed)
    if ds.mode != d["mode"]:
        # section defaults follow the requested mode
        d.update(warmup_epochs=None, schedule=None)
    return DownstreamConfig(**d)


def _train_once(kind, config, ev, encoder, data, summaries, train_ids, val_ids, test_ids, seed):
    ds = _downstream(config, kind, seed)
    pos = {rid: i for i, rid in enumerate(data.ids)}
    idx = lambda ids: np.array([pos[i] for i in ids], dtype=int)  # noqa: E731
    tr, va, te = idx(train_ids), idx(val_ids), idx(test_ids)
    agg = AggregationMode.parse(ev.agg, encoder.config.depth)
    if kind == "probe":
        head = aggregator = None
        if ev.freeze_gate_uniform:
            from .aggregate import _build

            head, aggregator = _build(summaries.shape[2], summaries.shape[1], data.labels.shape[1], agg, ds)
            aggregator.gate.freeze_uniform()
        return probe_train((train_ids, summaries[tr], data.labels[tr]), (val_ids, summaries[va], data.labels[va]),
                           (test_ids, summaries[te], data.labels[te]), agg, ds, head, aggregator)
    enc = copy.deepcopy(encoder)
    sig = data.signals.astype(config.dtype)
    with precision(config.dtype):
        return finetune_train(enc, (train_ids, sig[tr], data.labels[tr]), (val_ids, sig[va], data.labels[va]),
                              (test_ids, sig[te], data.labels[te]), agg, ds)


def cmd_downstream(args, config: RunConfig, kind):
    ev = _eval_settings(args, config)
    if kind == "finetune" and ev.freeze_gate_uniform:
        raise ConfigError("--freeze-gate-uniform is only supported for probing")
    out = _out_dir(args, config, None)
    data = _load_data(config)
    encoder = _load_encoder(config)
    AggregationMode.parse(ev.agg, encoder.config.depth)
    with _locked(out):
        write_resolved(config, out)
        summaries = _summaries(config, encoder, data, out) if kind == "probe" else None
        rows = []
        label = _mode_label(kind, ev, encoder.config.depth)
        for fold, (train_ids, val_ids, test_ids) in _splits(data, ev):
            for seed in ev.seeds:
                res = _train_once(kind, config, ev, encoder, data, summaries, train_ids, val_ids, test_ids, seed)
                rows.append({"fold": fold, "seed": seed, "task": data.manifest.task, "mode": label,
                             **res.test_metrics})
                log.info("fold %d seed %d macro AUC %.4f", fold, seed, res.test_metrics["macro_auc"])
                if res.gate_weights is not None:
                    np.savetxt(out / f"gate_weights_fold{fold}_seed{seed}.csv", res.gate_weights, delimiter=",",
                               header=",".join(f"layer{l + 1}" for l in range(res.gate_weights.shape[1])),
                               comments="")
        write_rows(out / "metrics.csv", METRICS_COLUMNS, rows)
        summary = {"task": data.manifest.task, "mode": label, "n": len(rows)}
        for m in METRIC_NAMES:
            summary[f"{m}_mean"], summary[f"{m}_std"] = summarize([r[m] for r in rows])
        write_rows(out / "summary.csv", list(summary), [summary])
        if kind == "probe" and ev.sweep_layers:
            fold, (train_ids, val_ids, test_ids) = next(_splits(data, ev))
            pos = {rid: i for i, rid in enumerate(data.ids)}
            part = lambda ids: (ids, summaries[[pos[i] for i in ids]], data.labels[[pos[i] for i in ids]])  # noqa: E731
            ds = _downstream(config, "probe", ev.seeds[0])
            sweep = layerwise_probe_sweep(part(train_ids), part(val_ids), part(test_ids), ds)
            write_rows(out / "layer_sweep.csv", SWEEP_COLUMNS, sweep)
            write_svg(out / "layer_sweep.svg", line_chart_svg(
                {"macro AUC": [r["macro_auc"] for r in sweep]}, title="Layer-wise probe", ylabel="macro AUC"))
    print(f"{label}: macro AUC {summary['macro_auc_mean']:.4f} over {len(rows)} run(s); results in {out}")


def cmd_analyze(args, config: RunConfig):
    an = copy.deepcopy(config.analyze)
    if args.query_lead:
        an.query_lead = args.query_lead.upper()
    if args.query_patch is not None:
        an.query_patch = args.query_patch
    config.analyze = an
    out = _out_dir(args, config, None)
    data = _load_data(config)
    encoder = _load_encoder(config)
    cfg = encoder.config
    if not 0 <= an.query_patch < cfg.num_patches:
        raise ConfigError(f"query_patch {an.query_patch} outside 0..{cfg.num_patches - 1}")
    signals = data.signals[: an.records].astype(config.dtype)
    if an.sample >= len(signals):
        raise ConfigError(f"sample {an.sample} outside the {len(signals)} analysed records")
    from .backbone import patchify
    from .numcore import no_grad

    with _locked(out):
        write_resolved(config, out)
        with precision(config.dtype), no_grad():
            emb = encoder.embed_tokens(patchify(signals, cfg.patch_length))
            _, acts = encoder.encode(emb, capture=True)
        acts.layout = encoder.layout
        sim = diag.avg_cosine(acts)
        ent = diag.entropy_profile(acts)
        con = diag.model_contraction(acts, emb.data, sample=an.sample)
        diag.write_csv(out / "cosine_profile.csv", ("layer", "lead", "mean_cos", "std_cos"), sim.rows())
        diag.write_csv(out / "entropy.csv", ("layer", "head", "aae"), ent.rows())
        diag.write_csv(out / "contraction.csv", ("layer", "delta_H", "delta_A_max", "product_bound"), con.rows())
        lead = LEAD_NAMES.index(an.query_lead) if cfg.leads == len(LEAD_NAMES) else 0
        query = acts.layout.patch_token(lead, an.query_patch)
        names = list(LEAD_NAMES) if cfg.leads == len(LEAD_NAMES) else [str(i) for i in range(cfg.leads)]
        for layer in range(1, cfg.depth + 1):
            cmap = diag.cosine_map(acts, layer, query, sample=an.sample)
            diag.write_map_csv(out / f"cosine_map_layer{layer}.csv", cmap.values, names)
            write_svg(out / f"cosine_map_layer{layer}.svg", heatmap_svg(
                cmap.values, names, title=f"Cosine to {an.query_lead} patch {an.query_patch}, layer {layer}",
                highlight=(lead, an.query_patch)))
        write_svg(out / "cosine_profile.svg", line_chart_svg({"mean": list(sim.mean)}, "Average cosine similarity",
                                                              ylabel="cosine"))
        write_svg(out / "entropy.svg", line_chart_svg({"AAE": list(ent.per_layer)}, "Average attention entropy",
                                                       ylabel="AAE"))
    print(f"diagnostics for {len(signals)} record(s) written to {out}")


def cmd_report(args, config: RunConfig | None):
    runs = list(args.runs) or (config.runs if config else [])
    if not runs:
        raise ConfigError("report needs at least one run directory")
    out = Path(args.out or (config.out if config and config.out else "report"))
    table = write_report(runs, out)
    print(f"merged {sum(e['n'] for e in table)} row(s) into {out / 'report.md'}")


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config) if args.config else None
        if config is not None and args.seed is not None:
            config.seed = args.seed
        with _thread_limit():
            if args.command == "report":
                cmd_report(args, config)
            elif args.command == "synth":
                cmd_synth(args, config)
            elif args.command == "pretrain":
                cmd_pretrain(args, config)
            elif args.command in ("probe", "finetune"):
                cmd_downstream(args, config, args.command)
            elif args.command == "analyze":
                cmd_analyze(args, config)
    except FoldLeakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LEAK
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, InputError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
