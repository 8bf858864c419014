"""Command-line interface: run experiments, sweep parameters, report and plot."""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import os
import sys

import numpy as np

from .config import ExperimentConfig, config_hash, load_config
from .errors import ConfigurationError, FedwardError, TrainingDivergenceError
from .metrics import compute_detection_metrics, compute_detection_metrics_per_client
from .records import load_stream

USAGE = """usage: fedward <command> [options]

commands:
  run <config.json>                      run an experiment, stream results
  ablate <config.json> --grid k=v1,v2    sweep config fields, one run each
  report <results.jsonl>                 print summary table rows
  plot <results.jsonl> --kind KIND       emit a figure (+ CSV) from results
  render-triggers <config.json>          render trigger patterns to images
"""

SUMMARY_FIELDS = ["defense", "attack", "alpha", "TPR", "FPR", "ASR", "BA", "seed"]


def _fmt_pct(x) -> str:
    return "-" if x is None else f"{100.0 * x:.1f}"


def _summary_row(cfg: ExperimentConfig, summary: dict) -> dict:
    return {
        "defense": cfg.defense.name,
        "attack": cfg.attack.strategy if cfg.attack_active else "none",
        "alpha": cfg.dataset.alpha,
        "TPR": "" if summary.get("tpr") is None else f"{summary['tpr']:.4f}",
        "FPR": "" if summary.get("fpr") is None else f"{summary['fpr']:.4f}",
        "ASR": "" if summary.get("final_asr") is None else f"{summary['final_asr']:.4f}",
        "BA": "" if summary.get("final_ba") is None else f"{summary['final_ba']:.4f}",
        "seed": cfg.seed,
    }


def write_summary_csv(path: str, rows: list[dict], cfg_hash: str | None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if cfg_hash:
            fh.write(f"# config_hash={cfg_hash}\n")
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def _run_config(cfg: ExperimentConfig) -> dict:
    if cfg.kind == "collision":
        from .collision import run_collision

        res = run_collision(cfg)
        print(
            f"collision: first={res.asr_after_first:.3f} "
            f"after_second={res.asr_after_second:.3f} after_clean={res.asr_after_clean:.3f}"
        )
        return {
            "type": "summary",
            "asr_after_first": res.asr_after_first,
            "asr_after_second": res.asr_after_second,
            "asr_after_clean": res.asr_after_clean,
        }
    from .flcore import run_experiment

    res = run_experiment(cfg)
    s = res.summary
    print(
        f"done: rounds={s['rounds']} TPR={_fmt_pct(s['tpr'])} FPR={_fmt_pct(s['fpr'])} "
        f"ASR={_fmt_pct(s['final_asr'])} BA={_fmt_pct(s['final_ba'])}"
    )
    if cfg.output.summary_path:
        write_summary_csv(cfg.output.summary_path, [_summary_row(cfg, s)], config_hash(cfg))
    return s


def cmd_run(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="fedward run")
    parser.add_argument("config")
    parser.add_argument("--out", help="override output.results_path")
    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    if args.out:
        cfg.output.results_path = args.out
    _run_config(cfg)
    return 0


def _set_path(obj: dict, dotted: str, value):
    parts = dotted.split(".")
    cur = obj
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


def _parse_grid(specs: list[str]) -> list[tuple[str, list]]:
    grids = []
    for spec in specs:
        if "=" not in spec:
            raise ConfigurationError(f"grid spec needs key=v1,v2 syntax: {spec!r}")
        key, vals = spec.split("=", 1)
        parsed = []
        for raw in vals.split(","):
            try:
                parsed.append(json.loads(raw))
            except json.JSONDecodeError:
                parsed.append(raw)
        grids.append((key.strip(), parsed))
    return grids


def cmd_ablate(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="fedward ablate")
    parser.add_argument("config")
    parser.add_argument("--grid", action="append", required=True,
                        help="dotted.path=value1,value2 (repeatable)")
    parser.add_argument("--out-dir", default=".")
    args = parser.parse_args(argv)
    base = load_config(args.config).to_dict()
    grids = _parse_grid(args.grid)
    os.makedirs(args.out_dir, exist_ok=True)

    rows = []
    keys = [k for k, _ in grids]
    for combo in itertools.product(*(vals for _, vals in grids)):
        obj = copy.deepcopy(base)
        tag_parts = []
        for key, value in zip(keys, combo):
            _set_path(obj, key, value)
            tag_parts.append(f"{key.split('.')[-1]}={value}")
        tag = "_".join(tag_parts).replace("/", "-")
        cfg = ExperimentConfig.from_dict(obj)
        cfg.output.results_path = os.path.join(args.out_dir, f"ablate_{tag}.jsonl")
        cfg.output.summary_path = None
        print(f"== {tag}")
        summary = _run_config(cfg)
        row = _summary_row(cfg, summary)
        rows.append(row)
    out_csv = os.path.join(args.out_dir, "ablate_summary.csv")
    write_summary_csv(out_csv, rows, None)
    print(f"wrote {out_csv}")
    return 0


def cmd_report(argv: list[str]) -> int:
    parser = argparse.ArgumentParser(prog="fedward report")
    parser.add_argument("results")
    args = parser.parse_args(argv)
    header, records, summary = load_stream(args.results)
    if header is None:
        raise ConfigurationError(f"{args.results}: no header line found")
    cfg_obj = header.get("config", {})
    recorded = header.get("config_hash")
    actual = config_hash(cfg_obj)
    if recorded != actual:
        print(f"warning: config hash mismatch (recorded {recorded}, recomputed {actual})",
              file=sys.stderr)
    cfg = ExperimentConfig.from_dict(cfg_obj)

    window = cfg.attack_window() if cfg.attack_active else None
    if window:
        tpr, fpr = compute_detection_metrics(records, window)
        tpr_c, fpr_c = compute_detection_metrics_per_client(records, window)
    else:
        tpr = fpr = tpr_c = fpr_c = None
    ba = next((r.ba for r in reversed(records) if r.ba is not None), None)
    asr = next((r.asr for r in reversed(records) if r.asr is not None), None)

    print(f"{'Defense':<12}{'Attack':<16}{'alpha':<8}{'TPR':>8}{'FPR':>8}{'ASR':>8}{'BA':>8}")
    attack = cfg.attack.strategy if cfg.attack_active else "none"
    print(
        f"{cfg.defense.name:<12}{attack:<16}{cfg.dataset.alpha:<8}"
        f"{_fmt_pct(tpr):>8}{_fmt_pct(fpr):>8}{_fmt_pct(asr):>8}{_fmt_pct(ba):>8}"
    )
    print(f"per-client: TPR={_fmt_pct(tpr_c)} FPR={_fmt_pct(fpr_c)}  (events are the headline)")
    print(f"rounds={len(records)} seed={cfg.seed}")
    return 0


def cmd_plot(argv: list[str]) -> int:
    from . import plots

    parser = argparse.ArgumentParser(prog="fedward plot")
    parser.add_argument("results")
    parser.add_argument("--kind", required=True, choices=plots.PLOT_KINDS)
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    header, records, _ = load_stream(args.results)
    cfg_hash = header.get("config_hash") if header else None
    out = args.out or f"{os.path.splitext(args.results)[0]}_{args.kind}.png"

    if args.kind == "collision":
        with open(args.results, "r", encoding="utf-8") as fh:
            points = [json.loads(l) for l in fh if l.strip()]
        points = [p for p in points if p.get("type") == "collision"]
        if not points:
            raise ConfigurationError("no collision points in this stream")
        plots.plot_collision(points, out, cfg_hash)
    elif args.kind == "wm_retention":
        plots.plot_wm_retention(records, out, cfg_hash)
    elif args.kind == "bias":
        plots.plot_bias(records, out, cfg_hash)
    elif args.kind == "norms":
        plots.plot_norms(records, out, cfg_hash)
    elif args.kind == "pca":
        plots.plot_pca(records, out, cfg_hash)
    print(f"wrote {out} and {os.path.splitext(out)[0]}.csv")
    return 0


def cmd_render_triggers(argv: list[str]) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .flcore import trigger_from_section
    from .triggers import render_trigger

    parser = argparse.ArgumentParser(prog="fedward render-triggers")
    parser.add_argument("config")
    parser.add_argument("--out-dir", default="triggers")
    args = parser.parse_args(argv)
    cfg = load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    shape = (3, cfg.dataset.image_size, cfg.dataset.image_size)
    written = []
    for label, section in (
        ("attack", cfg.attack.trigger),
        ("watermark", cfg.defense.watermark.trigger),
    ):
        spec = trigger_from_section(section)
        img = render_trigger(spec, shape)
        path = os.path.join(args.out_dir, f"trigger_{label}_{spec.kind}.png")
        plt.imsave(path, np.transpose(img, (1, 2, 0)))
        written.append(path)
    print("wrote " + ", ".join(written))
    return 0


COMMANDS = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "plot": cmd_plot,
    "render-triggers": cmd_render_triggers,
}


def cli(argv: list[str]) -> int:
    """Dispatch a subcommand; exit codes: 0 ok, 2 config error, 3 divergence,
    64 unknown subcommand."""
    if not argv or argv[0] in ("-h", "--help"):
        print(USAGE)
        return 0 if argv else 64
    cmd = argv[0]
    handler = COMMANDS.get(cmd)
    if handler is None:
        print(USAGE)
        print(f"unknown subcommand: {cmd}", file=sys.stderr)
        return 64
    try:
        return handler(argv[1:])
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 3
    except FedwardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
