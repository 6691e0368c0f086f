"""Command-line orchestration of the full pipeline.

Verbs: gen-data, train, tune, select, evaluate, export-cwr, reproduce.
Every command is deterministic under a fixed seed; report paths write the
delimited data files plus a rendered figure next to each.  The default
output root comes from $UNIONS_HOME when set.

Exit codes: 0 success, 2 validation error, 3 data/fingerprint error,
4 internal numerical error.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

from . import corpus as cp
from . import evaluation as ev
from . import figures
from . import selection as sel
from . import trainer as tr
from .config import ExperimentConfig, load_config
from .errors import (ConfigError, DataError, NumericalError, UnionsError,
                     ValidationError)

EXIT_VALIDATION = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _out_root(path: str | None) -> Path:
    if path:
        return Path(path)
    return Path(os.environ.get("UNIONS_HOME", "."))


def _parse_overrides(pairs: list[str] | None) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        overrides[key.strip()] = raw.strip()
    return overrides


def _config_from_args(args) -> ExperimentConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    for flag, key in (("seed", "seed"), ("languages", "corpus.languages"),
                      ("ul_weight", "tune.ul_weight"),
                      ("threshold", "select.threshold"),
                      ("beam", "eval.beam"), ("limit", "eval.limit"),
                      ("probe", "select.probe")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(getattr(args, "config", None), overrides)


def _prepare_out(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ValidationError(
                f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> Path:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(c) for c in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _load_corpus(data_dir: str) -> cp.Corpus:
    return cp.read_corpus(data_dir)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _config_from_args(args)
    out = _out_root(args.out)
    _prepare_out(out, args.force)
    corpus = cp.generate_corpus(**config.corpus_kwargs())
    fingerprint = cp.write_corpus(corpus, out)
    (out / "config.txt").write_text(config.render(), encoding="utf-8")
    print(f"corpus written to {out}")
    print(f"fingerprint {fingerprint}")
    print(f"train pairs {len(corpus.train_pairs)}, dev pairs {len(corpus.dev_pairs)}, "
          f"aligned test sentences {len(corpus.test_ids)}")
    return 0


def _resume_or_fresh(ckpt_dir: Path, phase: str, start_fn):
    existing = tr.list_checkpoints(ckpt_dir, phase)
    if existing:
        ckpt = tr.load_checkpoint(existing[-1])
        print(f"resuming {phase} from step {ckpt.step}")
        return ckpt
    return start_fn()


def cmd_train(args) -> int:
    config = _config_from_args(args)
    corpus = _load_corpus(args.data)
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_cfg = config.pretrain_config()
    model_cfg = config.model_config(len(corpus.vocab))
    ckpt = _resume_or_fresh(out, "pretrain",
                            lambda: tr.fresh_checkpoint(model_cfg, corpus))
    if ckpt.step >= train_cfg.total_steps:
        print(f"pretrain already at step {ckpt.step}; nothing to do")
        return 0
    with open(out / "train.log", "a", encoding="utf-8") as log:
        paths = tr.run_phase(ckpt, train_cfg, corpus, out, log=log, echo=print)
    print(f"saved {len(paths)} checkpoints under {out}")
    return 0


def cmd_tune(args) -> int:
    config = _config_from_args(args)
    corpus = _load_corpus(args.data)
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    phase = {"unions": "unions_tune", "vanilla": "vanilla_tune"}[args.phase]
    tune_cfg = config.tune_config(phase)
    if args.phase == "unions" and tune_cfg.ul_weight == 0.0:
        print("warning: ul_weight=0 under the unions phase equals vanilla "
              "continued training", file=sys.stderr)

    def start_fn():
        start = tr.load_checkpoint(args.start)
        if start.phase != "pretrain":
            print(f"note: tuning from a {start.phase} checkpoint")
        return start.clone_for_phase(phase)

    ckpt = _resume_or_fresh(out, phase, start_fn)
    if ckpt.step >= tune_cfg.total_steps:
        print(f"{phase} already at step {ckpt.step}; nothing to do")
        return 0
    with open(out / "train.log", "a", encoding="utf-8") as log:
        paths = tr.run_phase(ckpt, tune_cfg, corpus, out, log=log, echo=print)
    print(f"saved {len(paths)} checkpoints under {out}")
    return 0


def cmd_select(args) -> int:
    config = _config_from_args(args)
    corpus = _load_corpus(args.data)
    ckpt_dir = Path(args.checkpoints)
    paths = tr.list_checkpoints(ckpt_dir)
    if not paths:
        raise ValidationError(f"no checkpoints in {ckpt_dir}")
    series = [tr.load_checkpoint(p) for p in paths]
    result = sel.select_checkpoint(series, corpus,
                                   probe_size=config["select.probe"],
                                   threshold=config["select.threshold"],
                                   relative=config["select.relative"])
    out = Path(args.out) if args.out else ckpt_dir
    out.mkdir(parents=True, exist_ok=True)
    tsv = _write_tsv(out / "sep_trajectory.tsv", ["step", "sep"],
                     [[s, f"{v:.6f}"] for s, v in zip(result.steps, result.sep_values)])
    figures.sep_curve(result.steps, result.sep_values,
                      result.checkpoint.step, out / "sep_trajectory.png")
    selected = out / "selected.ckpt"
    shutil.copyfile(paths[result.selected_index], selected)
    print(f"selected step {result.checkpoint.step} "
          f"({'converged' if result.converged else 'NOT CONVERGED: last checkpoint'})")
    print(f"trajectory {tsv}")
    print(f"selected checkpoint copied to {selected}")
    return 0


def _evaluate_to_files(ckpt, corpus, directions, config, out_base: Path,
                       reference_as_hypothesis=False) -> dict:
    report = ev.evaluate_directions(
        ckpt, corpus, directions, beam=config["eval.beam"],
        length_penalty=config["eval.length_penalty"],
        limit=config["eval.limit"] or None,
        reference_as_hypothesis=reference_as_hypothesis)
    out_base.parent.mkdir(parents=True, exist_ok=True)
    out_base.with_suffix(".json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    rows = [[k, f"{v['bleu']:.2f}", f"{v['otr']:.4f}", v["sentences"], v["kind"]]
            for k, v in sorted(report["directions"].items())]
    _write_tsv(out_base.with_suffix(".tsv"),
               ["direction", "bleu", "otr", "sentences", "kind"], rows)
    figures.score_bars(report, out_base.with_suffix(".png"))
    return report


def _directions_for(corpus, which: str):
    if which == "supervised":
        return corpus.supervised_directions
    if which == "zeroshot":
        return corpus.zeroshot_directions
    return corpus.supervised_directions + corpus.zeroshot_directions


def cmd_evaluate(args) -> int:
    config = _config_from_args(args)
    corpus = _load_corpus(args.data)
    ckpt = tr.load_checkpoint(args.ckpt)
    if ckpt.corpus_fingerprint != corpus.fingerprint():
        raise DataError("checkpoint fingerprint does not match this corpus")
    out_base = Path(args.out) if args.out else Path(args.ckpt).with_suffix("")
    report = _evaluate_to_files(ckpt, corpus, _directions_for(corpus, args.directions),
                                config, out_base,
                                reference_as_hypothesis=args.reference_as_hypothesis)
    for key, row in sorted(report["directions"].items()):
        print(f"{key}\tBLEU {row['bleu']:.1f}\tOTR {100 * row['otr']:.1f}%")
    for kind, agg in sorted(report["aggregates"].items()):
        print(f"AVG {kind}\tBLEU {agg['bleu']:.1f}\tOTR {100 * agg['otr']:.1f}%")
    print(f"report {out_base.with_suffix('.json')}")
    return 0


ALL_SETTINGS = [s.value for s in sel.CwrSetting]


def _export_cwr_setting(ckpt, corpus, setting, probe, out_dir: Path, tag: str):
    pts = sel.extract_cwrs(ckpt, corpus, setting, probe_size=probe)
    base = out_dir / f"{tag}{setting}"
    with open(base.with_suffix(".jsonl"), "w", encoding="utf-8") as f:
        for lang in sorted(pts.points):
            for point in pts.points[lang]:
                f.write(json.dumps(
                    {"setting": setting, "step": pts.step, "lang": lang,
                     "point": [round(float(x), 8) for x in point]}) + "\n")
    coords, labels = sel.pca_project_2d(pts)
    rows = [[lab, f"{xy[0]:.6f}", f"{xy[1]:.6f}"] for lab, xy in zip(labels, coords)]
    _write_tsv(base.with_suffix(".tsv"), ["lang", "x", "y"], rows)
    figures.cwr_scatter(coords, labels, f"{tag}{setting} (step {pts.step})",
                        base.with_suffix(".png"))
    return pts


def cmd_export_cwr(args) -> int:
    config = _config_from_args(args)
    corpus = _load_corpus(args.data)
    ckpt = tr.load_checkpoint(args.ckpt)
    out = _out_root(args.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = ALL_SETTINGS if args.setting == "all" else [args.setting]
    probe = args.probe if args.probe is not None else config["cwr.probe"]
    for setting in settings:
        _export_cwr_setting(ckpt, corpus, setting, probe, out, "")
        print(f"exported {setting} points to {out}")
    return 0


# ---------------------------------------------------------------------------
# reproduce: gen -> pretrain -> (vanilla, unions) -> select -> evaluate
# ---------------------------------------------------------------------------


def _fmt_delta(value: float) -> str:
    return f"{value:+.1f}"


def _summary_tables(report_van: dict, report_uni: dict, kind: str) -> list[str]:
    keys = sorted(k for k, v in report_van["directions"].items() if v["kind"] == kind)
    lines = [
        f"### {kind.capitalize()} directions",
        "",
        "| model | " + " | ".join(["metric"] + keys + ["AVG"]) + " |",
        "|" + "---|" * (len(keys) + 3),
    ]
    for metric, scale, fmt in (("bleu", 1.0, "{:.1f}"), ("otr", 100.0, "{:.1f}")):
        van_row = [report_van["directions"][k][metric] * scale for k in keys]
        uni_row = [report_uni["directions"][k][metric] * scale for k in keys]
        van_avg = report_van["aggregates"][kind][metric] * scale
        uni_avg = report_uni["aggregates"][kind][metric] * scale
        name = "BLEU" if metric == "bleu" else "OTR %"
        lines.append("| Vanilla | " + " | ".join(
            [name] + [fmt.format(x) for x in van_row] + [fmt.format(van_avg)]) + " |")
        lines.append("| +UNIONS | " + " | ".join(
            [name] + [fmt.format(x) for x in uni_row] + [fmt.format(uni_avg)]) + " |")
        lines.append("| Delta | " + " | ".join(
            [name] + [_fmt_delta(u - v) for v, u in zip(van_row, uni_row)]
            + [_fmt_delta(uni_avg - van_avg)]) + " |")
    lines.append("")
    return lines


def cmd_reproduce(args) -> int:
    config = _config_from_args(args)
    out = _out_root(args.out)
    _prepare_out(out, args.force)
    (out / "config.txt").write_text(config.render(), encoding="utf-8")

    stage = "gen-data"
    try:
        corpus = cp.generate_corpus(**config.corpus_kwargs())
        fingerprint = cp.write_corpus(corpus, out / "data")
        print(f"[gen-data] fingerprint {fingerprint}")

        stage = "pretrain"
        model_cfg = config.model_config(len(corpus.vocab))
        (out / "pretrain").mkdir(parents=True, exist_ok=True)
        with open(out / "pretrain" / "train.log", "w", encoding="utf-8") as log:
            pre_paths = tr.pretrain(model_cfg, config.pretrain_config(), corpus,
                                    out / "pretrain", log=log, echo=print)
        start = tr.load_checkpoint(pre_paths[-1])

        stage = "vanilla_tune"
        (out / "vanilla").mkdir(parents=True, exist_ok=True)
        with open(out / "vanilla" / "train.log", "w", encoding="utf-8") as log:
            van_paths = tr.vanilla_tune(start, config.tune_config("vanilla_tune"),
                                        corpus, out / "vanilla", log=log, echo=print)

        stage = "unions_tune"
        (out / "unions").mkdir(parents=True, exist_ok=True)
        with open(out / "unions" / "train.log", "w", encoding="utf-8") as log:
            uni_paths = tr.unions_tune(start, config.tune_config("unions_tune"),
                                       corpus, out / "unions", log=log, echo=print)

        stage = "select"
        series = [tr.load_checkpoint(p) for p in uni_paths]
        result = sel.select_checkpoint(series, corpus,
                                       probe_size=config["select.probe"],
                                       threshold=config["select.threshold"],
                                       relative=config["select.relative"])
        select_dir = out / "select"
        select_dir.mkdir(parents=True, exist_ok=True)
        _write_tsv(select_dir / "sep_trajectory.tsv", ["step", "sep"],
                   [[s, f"{v:.6f}"] for s, v in zip(result.steps, result.sep_values)])
        figures.sep_curve(result.steps, result.sep_values, result.checkpoint.step,
                          select_dir / "sep_trajectory.png")
        shutil.copyfile(uni_paths[result.selected_index], select_dir / "selected.ckpt")
        selected = result.checkpoint
        print(f"[select] step {selected.step} "
              f"({'converged' if result.converged else 'not converged'})")

        stage = "evaluate"
        baseline = tr.load_checkpoint(van_paths[result.selected_index])
        dirs_all = corpus.supervised_directions + corpus.zeroshot_directions
        report_pre = _evaluate_to_files(start, corpus, corpus.zeroshot_directions,
                                        config, out / "eval" / "pretrain_zeroshot")
        report_van = _evaluate_to_files(baseline, corpus, dirs_all, config,
                                        out / "eval" / "vanilla")
        report_uni = _evaluate_to_files(selected, corpus, dirs_all, config,
                                        out / "eval" / "unions")

        # per-checkpoint zero-shot dynamics over the tuning series
        dyn_limit = config["eval.dynamics_limit"] or None
        dyn_rows = []
        for ckpt in series:
            rep = ev.evaluate_directions(ckpt, corpus, corpus.zeroshot_directions,
                                         beam=config["eval.beam"],
                                         length_penalty=config["eval.length_penalty"],
                                         limit=dyn_limit)
            agg = rep["aggregates"]["zeroshot"]
            dyn_rows.append([ckpt.step, f"{agg['otr']:.4f}", f"{agg['bleu']:.2f}"])
        _write_tsv(out / "eval" / "dynamics.tsv", ["step", "otr", "bleu"], dyn_rows)
        figures.tune_dynamics([r[0] for r in dyn_rows],
                              [float(r[1]) for r in dyn_rows],
                              [float(r[2]) for r in dyn_rows],
                              selected.step, out / "eval" / "dynamics.png")

        stage = "export-cwr"
        cwr_dir = out / "cwr"
        cwr_dir.mkdir(parents=True, exist_ok=True)
        sep_vanilla_off = None
        for setting in ALL_SETTINGS:
            pts = _export_cwr_setting(start, corpus, setting, config["cwr.probe"],
                                      cwr_dir, "vanilla_")
            if setting == sel.CwrSetting.ZEROSHOT_OFF.value:
                sep_vanilla_off = sel.separation_degree(pts)
        pts_uni = _export_cwr_setting(selected, corpus,
                                      sel.CwrSetting.ZEROSHOT_OFF.value,
                                      config["cwr.probe"], cwr_dir, "unions_")
        sep_unions_off = sel.separation_degree(pts_uni)

        stage = "summary"
        zs_pre = report_pre["aggregates"]["zeroshot"]
        zs_van = report_van["aggregates"]["zeroshot"]
        zs_uni = report_uni["aggregates"]["zeroshot"]
        lines = [
            "# Zero-shot tuning summary",
            "",
            f"- seed: {config.seed}",
            f"- corpus fingerprint: `{fingerprint}`",
            f"- pretrain steps: {start.step}; tuning steps: "
            f"{config['tune.steps']} (checkpoint every {config['tune.checkpoint_every']})",
            f"- selected tuning step: {selected.step} "
            f"({'converged' if result.converged else 'not converged'})",
            f"- baseline: vanilla continued training at the same step "
            f"({baseline.step})",
            f"- pretrained model zero-shot: BLEU {zs_pre['bleu']:.1f}, "
            f"OTR {100 * zs_pre['otr']:.1f}%",
            f"- separation (zero-shot off-target probe): vanilla "
            f"{sep_vanilla_off:.3f} vs +UNIONS {sep_unions_off:.3f}",
            "",
        ]
        lines += _summary_tables(report_van, report_uni, "zeroshot")
        lines += _summary_tables(report_van, report_uni, "supervised")
        rel = (100.0 * (zs_van["otr"] - zs_uni["otr"]) / zs_van["otr"]
               if zs_van["otr"] > 0 else 0.0)
        lines += [
            "### Headline",
            "",
            f"- zero-shot OTR: {100 * zs_van['otr']:.1f}% -> "
            f"{100 * zs_uni['otr']:.1f}% ({rel:.0f}% relative reduction)",
            f"- zero-shot BLEU: {zs_van['bleu']:.1f} -> {zs_uni['bleu']:.1f} "
            f"({_fmt_delta(zs_uni['bleu'] - zs_van['bleu'])})",
            f"- supervised BLEU: {report_van['aggregates']['supervised']['bleu']:.1f} "
            f"-> {report_uni['aggregates']['supervised']['bleu']:.1f} "
            f"({_fmt_delta(report_uni['aggregates']['supervised']['bleu'] - report_van['aggregates']['supervised']['bleu'])})",
            "",
        ]
        summary = out / "summary.md"
        summary.write_text("\n".join(lines), encoding="utf-8")
        print(f"[summary] {summary}")
        return 0
    except UnionsError as e:
        raise type(e)(f"stage {stage} failed: {e}") from e


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unions",
        description="Synthetic-corpus laboratory for unlikelihood tuning of "
                    "multilingual translation models")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key=value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable)")
            p.add_argument("--seed", type=int, help="global seed")

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--out", help="output directory (default $UNIONS_HOME)")
    p.add_argument("--languages", type=int, help="number of languages (>= 4)")
    p.add_argument("--force", action="store_true",
                   help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="pretrain the multilingual model (MLE only)")
    common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--out", help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="continue training from a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--start", required=True, help="pretrain checkpoint to tune from")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--phase", choices=("unions", "vanilla"), required=True)
    p.add_argument("--ul-weight", dest="ul_weight", type=float,
                   help="unlikelihood weight (unions phase)")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("select", help="pick a tuning checkpoint by separation score")
    common(p)
    p.add_argument("--checkpoints", required=True, help="tuning checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="output directory (default: checkpoint dir)")
    p.add_argument("--threshold", type=float, help="convergence threshold")
    p.add_argument("--probe", type=int, help="probe sentences for the indicator")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="beam-decode the test split and score it")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--directions", choices=("supervised", "zeroshot", "all"),
                   default="all")
    p.add_argument("--beam", type=int)
    p.add_argument("--limit", type=int, help="sentences per direction (0 = all)")
    p.add_argument("--out", help="report base path (writes .json/.tsv/.png)")
    p.add_argument("--reference-as-hypothesis", action="store_true",
                   help="score the references against themselves (metric self-test)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-cwr", help="export decoder states and 2-D projections")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--setting", choices=ALL_SETTINGS + ["all"], default="all")
    p.add_argument("--probe", type=int, help="probe sentences (default cwr.probe)")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_export_cwr)

    p = sub.add_parser("reproduce", help="run the full pipeline and summarize")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
