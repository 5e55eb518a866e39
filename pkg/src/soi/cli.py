"""Command-line entry points: ingest, analyze, pretrain, eval, embed, gradcheck.

Every command resolves its configuration (defaults < --config file < --set
overrides < --seed), echoes the resolved document and tool version into the
output directory, then runs.  Exit codes are stable:

    0 success   1 config error   2 data error   3 numeric fault   4 io error

``SOI_LOG`` selects the log level (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

import soi
from soi import config as cfgmod
from soi import contrastive, data, diversity, fewshot, verify
from soi.errors import CheckpointError, ConfigError, DataError, NumericFault
from soi.imgproc import bilinear_resize

log = logging.getLogger("soi")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soi", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="JSON config file (see soi.config.DEFAULTS)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    parser.add_argument("--seed", type=int, help="override the run seed")
    parser.add_argument("--out", default="soi_out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("ingest", help="fetch + quality-check sources into a pool cache")

    p = sub.add_parser("analyze", help="six-metric diversity entropy of image directories")
    p.add_argument("datasets", nargs="+", help="one or two image directories")
    p.add_argument("--json", action="store_true", help="also emit a JSON report")

    p = sub.add_parser("pretrain", help="contrastive pretraining over the pool cache")
    p.add_argument("--pool", help="pool cache directory (default <out>/<paths.pool_cache>)")
    p.add_argument("--resume", help="resume from a train_state checkpoint")

    p = sub.add_parser("eval", help="episodic few-shot evaluation of a frozen encoder")
    p.add_argument("--checkpoint", required=True, help="frozen-encoder checkpoint")
    p.add_argument("--data-dir", required=True, help="labeled dataset: one subdirectory per class")

    p = sub.add_parser("embed", help="export embeddings for a labeled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)

    sub.add_parser("gradcheck", help="run the double-precision gradient suite")
    return parser


def _decode_image_file(path: Path) -> np.ndarray | None:
    try:
        img = Image.open(path).convert("RGB")
    except Exception:
        return None
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_labeled_directory(root, input_hw) -> fewshot.LabeledDataset:
    """Class-per-subdirectory image tree -> LabeledDataset at the model size."""
    root = Path(root)
    classes = sorted(p for p in root.iterdir() if p.is_dir())
    if not classes:
        raise DataError(f"no class subdirectories under {root}")
    items, ids = [], []
    for cls_id, cls_dir in enumerate(classes):
        for f in sorted(cls_dir.iterdir()):
            if not f.is_file():
                continue
            img = _decode_image_file(f)
            if img is None:
                log.warning("skipping undecodable %s", f)
                continue
            items.append((bilinear_resize(img, *input_hw).astype(np.float32), cls_id))
            ids.append(str(f.relative_to(root)))
    if not items:
        raise DataError(f"no decodable images under {root}")
    return fewshot.LabeledDataset(items, ids=ids)


# -- commands ----------------------------------------------------------------------


def cmd_ingest(cfg: dict, args, out: Path) -> int:
    d = cfg["data"]
    if bool(d["manifest"]) == bool(d["directory"]):
        raise ConfigError("ingest needs exactly one of data.manifest or data.directory")
    entries = (data.read_manifest(d["manifest"]) if d["manifest"]
               else data.directory_entries(d["directory"]))
    fetch_cfg = cfgmod.fetch_config_from(cfg)
    results = data.fetch(entries, fetch_cfg)
    data.write_fetch_report(results, out / "fetch_report.csv")

    checker = data.QualityChecker(fetch_cfg.min_dim)
    records, failures = [], 0
    for r in results:
        if not r.ok:
            failures += 1
            continue
        outcome = checker.check(r.source, r.data, r.keyword)
        if outcome.ok:
            records.append(outcome.record)
        else:
            failures += 1
    log.info("ingest: %d passed, %d failed", len(records), failures)
    if not records:
        raise DataError("no records passed the quality check")
    pool = data.build_pool(records, shuffle_seed=cfg["seed"])
    data.save_pool_cache(pool, out / cfg["paths"]["pool_cache"])
    return EXIT_OK


def cmd_analyze(cfg: dict, args, out: Path) -> int:
    reports = []
    for path in args.datasets:
        root = Path(path)
        if not root.is_dir():
            raise DataError(f"not a directory: {path}")
        images = []
        for f in sorted(root.rglob("*")):
            if f.is_file():
                img = _decode_image_file(f)
                if img is not None:
                    images.append(img)
        if not images:
            raise DataError(f"no decodable images under {path}")
        reports.append(diversity.analyze(images, dataset_id=str(path)))
    if len(reports) >= 2:
        csv_text = diversity.compare_report(reports[0], reports[1])
    else:
        csv_text = diversity.single_report_csv(reports[0])
    (out / "diversity.csv").write_text(csv_text, encoding="utf-8")
    if args.json:
        import json

        (out / "diversity.json").write_text(
            json.dumps(diversity.report_json(reports), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
    sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_pretrain(cfg: dict, args, out: Path) -> int:
    pool_dir = Path(args.pool) if args.pool else out / cfg["paths"]["pool_cache"]
    pool = data.load_pool_cache(pool_dir)
    ckpt_dir = out / cfg["paths"]["checkpoints"]
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        state, queue, optimizer, train_cfg = contrastive.load_training_checkpoint(args.resume)
        enc_cfg, head_cfg = state.encoder_config, state.head_config
        log.info("resuming at step %d", state.step_count)
    else:
        enc_cfg = cfgmod.encoder_config_from(cfg)
        head_cfg = cfgmod.head_config_from(cfg)
        train_cfg = cfgmod.train_config_from(cfg)
        state = contrastive.DualEncoderState(enc_cfg, head_cfg, train_cfg.seed)
        queue = contrastive.EmbeddingQueue(train_cfg.queue_capacity, head_cfg.out_dim)
        optimizer = contrastive.SGD(state._online_params(), train_cfg.sgd_momentum,
                                    train_cfg.weight_decay)
        contrastive.save_training_checkpoint(ckpt_dir / "init.soi", state, queue,
                                             optimizer, train_cfg)

    policy = cfgmod.augment_policy_from(cfg, enc_cfg.input_size[1:])
    images = [data.decode_resize(rec, enc_cfg.input_size[1:]) for rec in pool]

    loss_rows = ["step,loss,lr,queue_fill"]

    def log_sink(step, loss, lr, fill):
        loss_rows.append(f"{step},{loss:.9g},{lr:.9g},{fill}")

    def checkpoint_sink(st, qu, opt, final):
        name = "final_state.soi" if final else f"step_{st.step_count:06d}.soi"
        contrastive.save_training_checkpoint(ckpt_dir / name, st, qu, opt, train_cfg)

    try:
        encoder = contrastive.pretrain(
            images, train_cfg, enc_cfg, head_cfg, policy=policy,
            checkpoint_sink=checkpoint_sink, log_sink=log_sink,
            state=state, queue=queue, optimizer=optimizer,
        )
    finally:
        (out / "loss_log.csv").write_text("\n".join(loss_rows) + "\n", encoding="utf-8")
    contrastive.save_encoder_checkpoint(ckpt_dir / "encoder_final.soi", encoder,
                                        train_cfg, head_cfg, state.step_count)
    log.info("pretraining finished at step %d", state.step_count)
    return EXIT_OK


def _load_frozen(checkpoint_path):
    # ConfigError (wrong artifact kind) -> exit 1; CheckpointError (unreadable
    # or corrupt file) -> exit 4
    return contrastive.load_encoder_checkpoint(checkpoint_path)


def cmd_eval(cfg: dict, args, out: Path) -> int:
    encoder, snapshot = _load_frozen(args.checkpoint)
    dataset = load_labeled_directory(args.data_dir, encoder.config.input_size[1:])
    e = cfg["eval"]
    kinds = e["classifiers"]
    bad = [k for k in kinds if k not in fewshot.CLASSIFIER_KINDS]
    if bad:
        raise ConfigError(f"unknown classifier kinds {bad}; pick from {fewshot.CLASSIFIER_KINDS}")
    reports = fewshot.evaluate_kinds(
        encoder, dataset, (e["n_way"], e["k_shot"], e["q_query"]),
        e["episodes"], kinds, seed=cfg["seed"], reg=e["reg"],
    )
    reports_dir = out / cfg["paths"]["reports"]
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "eval_report.csv").write_text(fewshot.reports_csv(reports), encoding="utf-8")
    table = fewshot.comparison_table(reports)
    (reports_dir / "eval_table.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_embed(cfg: dict, args, out: Path) -> int:
    encoder, _ = _load_frozen(args.checkpoint)
    dataset = load_labeled_directory(args.data_dir, encoder.config.input_size[1:])
    fewshot.export_embeddings(encoder, dataset, out / "embeddings.csv")
    return EXIT_OK


def cmd_gradcheck(cfg: dict, args, out: Path) -> int:
    checks = verify.run_gradcheck_suite()
    lines = []
    worst = 0.0
    for name, err in checks:
        status = "PASS" if err < verify.TOLERANCE else "FAIL"
        lines.append(f"{status}  {name:<28} max_rel_err={err:.3e}")
        worst = max(worst, err)
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    (out / "gradcheck.txt").write_text(text, encoding="utf-8")
    if worst >= verify.TOLERANCE:
        raise NumericFault(f"gradient check failed: max relative error {worst:.3e}")
    return EXIT_OK


_COMMANDS = {
    "ingest": cmd_ingest,
    "analyze": cmd_analyze,
    "pretrain": cmd_pretrain,
    "eval": cmd_eval,
    "embed": cmd_embed,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SOI_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, overrides=args.set, seed=args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfgmod.echo_config(cfg, out, soi.__version__)
        return _COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFault as exc:
        log.error("numeric fault: %s", exc)
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        log.error("io error: %s", exc)
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
