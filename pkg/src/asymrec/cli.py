"""Command-line pipeline: synth, train-mhq, assign, train-rec, eval, fuse, spectrum.

Every command writes a ``<command>.manifest`` JSON file in the output directory
listing the config, seed, version and sha256 of every input and output.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, evaluation, mhq
from .binio import sha256_file
from .config import RunConfig, dump_config, load_run_config
from .errors import AsymRecError, ConfigError, FormatError, UsageError
from .recmodel import (
    VARIANTS,
    input_representations,
    last_hidden,
    load_checkpoint,
    make_scorer,
    save_checkpoint,
    train,
)

log = logging.getLogger("asymrec")


def _require(*paths) -> None:
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"required input {p} does not exist")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_manifest(cfg: RunConfig, command: str, inputs: list, outputs: list) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.as_dict(),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
    }
    path = cfg.out / f"{command}.manifest"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# paths of intermediate artifacts inside out_dir
def codebooks_path(cfg):
    return cfg.out / "codebooks.mhq"


def codes_path(cfg):
    return cfg.out / "codes.tsv"


def checkpoint_path(cfg, variant=None):
    return cfg.out / f"model-{variant or cfg.variant}.arec"


def predictions_path(cfg, variant=None):
    return cfg.out / f"predictions-{variant or cfg.variant}-{cfg.split}.tsv"


def _load_inputs(cfg: RunConfig):
    _require(cfg.embeddings, cfg.interactions)
    table = data.load_embeddings(cfg.embeddings)
    dataset = data.load_interactions(cfg.interactions, table.n_items)
    return table, dataset


def _needs_codes(variant: str) -> bool:
    return variant != "continuous-output"


def cmd_synth(cfg: RunConfig) -> list:
    table, dataset = data.synth_dataset(
        cfg.seed,
        cfg.n_items,
        cfg.dim,
        cfg.n_users,
        cfg.clusters,
        (cfg.seq_min, cfg.seq_max),
        stay_prob=cfg.stay_prob,
        noise=cfg.noise,
    )
    for p in (cfg.embeddings, cfg.interactions):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    data.save_embeddings(table, cfg.embeddings)
    data.save_interactions(dataset, cfg.interactions)
    log.info("wrote %d items and %d users", table.n_items, len(dataset))
    write_manifest(cfg, "synth", [], [cfg.embeddings, cfg.interactions])
    return [cfg.embeddings, cfg.interactions]


def cmd_train_mhq(cfg: RunConfig) -> list:
    _require(cfg.embeddings)
    table = data.load_embeddings(cfg.embeddings)
    result = mhq.train(cfg.mhq_config(), table)
    out_cb, out_log = codebooks_path(cfg), cfg.out / "mhq_loss.csv"
    mhq.save_codebooks(result.codebooks, out_cb)
    cols = ("epoch", "rec", "bal", "reg", "total", "reseeded")
    rows = [",".join(cols) + "\n"] + [",".join(_fmt(h[c]) for c in cols) + "\n" for h in result.history]
    out_log.write_text("".join(rows), encoding="utf-8")
    log.info("final reconstruction loss %.6g", result.history[-1]["rec"] if result.history else float("nan"))
    write_manifest(cfg, "train-mhq", [cfg.embeddings], [out_cb, out_log])
    return [out_cb, out_log]


def cmd_assign(cfg: RunConfig) -> list:
    _require(cfg.embeddings, codebooks_path(cfg))
    table = data.load_embeddings(cfg.embeddings)
    cb = mhq.load_codebooks(codebooks_path(cfg))
    codes = mhq.assign_codes(cb, table.matrix)
    report = mhq.collision_report(codes)
    out_codes, out_report = codes_path(cfg), cfg.out / "collisions.txt"
    mhq.save_codes(codes, out_codes)
    lines = [
        f"n_items\t{report.n_items}\n",
        f"unique_items\t{report.unique_items}\n",
        f"distinct_codes\t{report.distinct_codes}\n",
        f"unique_fraction\t{_fmt(report.unique_fraction)}\n",
    ]
    lines += [f"group\t{','.join(map(str, g))}\n" for g in report.groups]
    out_report.write_text("".join(lines), encoding="utf-8")
    log.info("%d of %d items have a unique code", report.unique_items, report.n_items)
    write_manifest(cfg, "assign", [cfg.embeddings, codebooks_path(cfg)], [out_codes, out_report])
    return [out_codes, out_report]


def cmd_train_rec(cfg: RunConfig) -> list:
    table, dataset = _load_inputs(cfg)
    inputs = [cfg.embeddings, cfg.interactions]
    codes, K, mhq_hash = None, None, ""
    if _needs_codes(cfg.variant):
        _require(codes_path(cfg))
        codes = mhq.load_codes(codes_path(cfg))
        K = cfg.K
        if codes.size and int(codes.max()) >= K:
            raise FormatError(f"codes file holds index {int(codes.max())} but K={K}")
        mhq_hash = sha256_file(codes_path(cfg))
        inputs.append(codes_path(cfg))
    result = train(cfg.rec_config(), dataset, table.matrix, codes, K, mhq_hash)
    out_ckpt, out_log = checkpoint_path(cfg), cfg.out / f"train_log-{cfg.variant}.csv"
    save_checkpoint(result.model, out_ckpt)
    rows = ["epoch,loss,valid_ndcg10\n"] + [
        f"{h['epoch']},{_fmt(h['loss'])},{_fmt(h['valid_ndcg10'])}\n" for h in result.history
    ]
    out_log.write_text("".join(rows), encoding="utf-8")
    log.info("best validation epoch %d of %d", result.best_epoch, len(result.history))
    write_manifest(cfg, f"train-rec-{cfg.variant}", inputs, [out_ckpt, out_log])
    return [out_ckpt, out_log]


def _eval_one(cfg, variant, table, dataset, codes, bins):
    model = load_checkpoint(checkpoint_path(cfg, variant))
    if model.d != table.dim:
        raise ConfigError(f"checkpoint expects {model.d}-d embeddings, table has {table.dim}")
    scorer = make_scorer(model, table.matrix, codes)
    report = evaluation.evaluate(scorer, dataset, cfg.split, bins)
    contexts = dataset.contexts(cfg.split)
    ranked = evaluation.top_k(scorer, [c for _, c, _ in contexts], cfg.topk)
    preds = [(uid, r) for (uid, _, _), r in zip(contexts, ranked)]
    return model, report, preds


def cmd_eval(cfg: RunConfig) -> list:
    table, dataset = _load_inputs(cfg)
    bins = cfg.bin_boundaries()
    inputs = [cfg.embeddings, cfg.interactions]
    codes = None
    if Path(codes_path(cfg)).is_file():
        codes = mhq.load_codes(codes_path(cfg))
        inputs.append(codes_path(cfg))
    variants = [v for v in VARIANTS if checkpoint_path(cfg, v).is_file()] if cfg.ablation else [cfg.variant]
    if not variants:
        raise ConfigError(f"no checkpoints found in {cfg.out}")
    outputs, ablation_rows = [], []
    for variant in variants:
        _require(checkpoint_path(cfg, variant))
        if _needs_codes(variant) and codes is None:
            raise ConfigError(f"variant {variant} needs {codes_path(cfg)}")
        inputs.append(checkpoint_path(cfg, variant))
        model, report, preds = _eval_one(cfg, variant, table, dataset, codes, bins)
        out_report = cfg.out / f"report-{variant}-{cfg.split}.tsv"
        out_preds = predictions_path(cfg, variant)
        evaluation.save_report(report, bins, out_report)
        evaluation.save_predictions(preds, out_preds)
        outputs += [out_report, out_preds]
        ablation_rows.append((variant, report))
        if cfg.binned:
            reps = input_representations(model, table.matrix, codes)
            binned = evaluation.binned_input_retrieval(reps, dataset, bins, cfg.negatives, cfg.seed, cfg.split)
            out_bins = cfg.out / f"bins-{variant}-{cfg.split}.csv"
            evaluation.save_bins_csv(bins, binned.recall10, out_bins)
            outputs.append(out_bins)
        if cfg.spectrum:
            outputs += _write_spectrum(cfg, model, variant, table, dataset, codes)
        if cfg.fuse_with:
            _require(cfg.fuse_with)
            inputs.append(cfg.fuse_with)
            fused = evaluation.fuse_predictions(preds, evaluation.load_predictions(cfg.fuse_with), cfg.k0, cfg.topk)
            out_fused = cfg.out / f"fused-{variant}-{cfg.split}.tsv"
            evaluation.save_predictions(fused, out_fused)
            outputs.append(out_fused)
        log.info("%s %s recall@10=%.4f ndcg@10=%.4f", variant, cfg.split, report.recall10, report.ndcg10)
    if cfg.ablation:
        out_table = cfg.out / f"ablation-{cfg.split}.tsv"
        lines = ["variant\trecall@5\trecall@10\tndcg@5\tndcg@10\n"]
        for variant, r in ablation_rows:
            lines.append("\t".join([variant] + [_fmt(v) for v in (r.recall5, r.recall10, r.ndcg5, r.ndcg10)]) + "\n")
        out_table.write_text("".join(lines), encoding="utf-8")
        outputs.append(out_table)
    write_manifest(cfg, "eval", inputs, outputs)
    return outputs


def _write_spectrum(cfg, model, variant, table, dataset, codes) -> list:
    contexts = [c for _, c, _ in dataset.contexts(cfg.split)]
    hidden = last_hidden(model, contexts, table.matrix, codes)
    p = evaluation.normalized_spectrum(hidden)
    out_csv = cfg.out / f"spectrum-{variant}-{cfg.split}.csv"
    out_er = cfg.out / f"effective_rank-{variant}-{cfg.split}.txt"
    evaluation.save_spectrum_csv(p, out_csv)
    out_er.write_text(f"effective_rank\t{_fmt(evaluation.effective_rank_from_spectrum(p))}\n", encoding="utf-8")
    return [out_csv, out_er]


def cmd_spectrum(cfg: RunConfig) -> list:
    table, dataset = _load_inputs(cfg)
    _require(checkpoint_path(cfg))
    inputs = [cfg.embeddings, cfg.interactions, checkpoint_path(cfg)]
    codes = None
    if _needs_codes(cfg.variant):
        _require(codes_path(cfg))
        codes = mhq.load_codes(codes_path(cfg))
        inputs.append(codes_path(cfg))
    model = load_checkpoint(checkpoint_path(cfg))
    outputs = _write_spectrum(cfg, model, cfg.variant, table, dataset, codes)
    write_manifest(cfg, f"spectrum-{cfg.variant}", inputs, outputs)
    return outputs


def cmd_fuse(cfg: RunConfig) -> list:
    if not cfg.predictions or not cfg.predictions_b:
        raise UsageError("fuse needs --predictions and --predictions-b")
    _require(cfg.predictions, cfg.predictions_b)
    a = evaluation.load_predictions(cfg.predictions)
    b = evaluation.load_predictions(cfg.predictions_b)
    out = cfg.out / "fused.tsv"
    evaluation.save_predictions(evaluation.fuse_predictions(a, b, cfg.k0, cfg.topk), out)
    write_manifest(cfg, "fuse", [cfg.predictions, cfg.predictions_b], [out])
    return [out]


COMMANDS = {
    "synth": cmd_synth,
    "train-mhq": cmd_train_mhq,
    "assign": cmd_assign,
    "train-rec": cmd_train_rec,
    "eval": cmd_eval,
    "fuse": cmd_fuse,
    "spectrum": cmd_spectrum,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asymrec",
        description="Semantic-ID tokenizer and generative recommender pipeline.",
        epilog="Any config key may be overridden as --key value (dashes or underscores).",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--verbose", "-v", action="count", default=0)
    parser.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else UsageError.exit_code
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_run_config(args.config, rest)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return 0
        cfg.out.mkdir(parents=True, exist_ok=True)
        for path in COMMANDS[args.command](cfg):
            print(path)
    except AsymRecError as exc:
        log.error("%s", exc)
        return exc.exit_code
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
