"""``vipcnn`` command line: synth, cleanse, train, eval, nms-bench, ablation.

Every command writes ``resolved_config.txt`` into its output directory;
passing that file back through ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DimensionError, InvalidInput, NonFiniteLoss

log = logging.getLogger("vipcnn")


def _out_dir(cfg) -> Path:
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _limit_threads(n: int) -> None:
    # BLAS reads these when numpy loads, so this must run before any numpy import
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _model_config(cfg, vocab):
    from .ablation import variant_config
    base = replace(cfg.model, n_obj=len(vocab.objects), n_pred=len(vocab.predicates), seed=cfg.seed)
    return variant_config(base, cfg.variant)


def _embedding_tables(cfg, vocab):
    from .training import load_embeddings
    d = Path(cfg.paths.embeddings)
    return {"object": load_embeddings(d / "objects.vec", vocab.objects),
            "predicate": load_embeddings(d / "predicates.vec", vocab.predicates)}


# ----------------------------------------------------------------- commands

def cmd_synth(cfg) -> int:
    from .data import Vocabulary, generate_dataset, save_scenes, split_dataset, write_annotations
    out = _out_dir(cfg)
    if any(f < 0 for f in cfg.fractions) or abs(sum(cfg.fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {cfg.fractions} must be non-negative and sum to 1")
    synth = replace(cfg.synth, seed=cfg.seed)
    scenes = generate_dataset(synth, cfg.n_images)
    save_scenes(scenes, out)
    anns = [a for sc in scenes for a in sc.relationships]
    for name, part in zip(("train", "val", "test"), split_dataset(anns, cfg.fractions, seed=cfg.seed)):
        write_annotations(out / f"{name}.tsv", part)
        print(f"{name}: {len({a.image_id for a in part})} images, {len(part)} relationships")
    Vocabulary.from_synth(synth).save(out)
    print(f"wrote {len(scenes)} images and {len(anns)} relationships to {out}")
    return 0


def cmd_cleanse(cfg, args) -> int:
    from .data import (cleanse_labels, frequency_filter, load_synonym_table, read_annotations,
                       write_annotations)
    out = _out_dir(cfg)
    stats: dict = {}
    anns = read_annotations(args.input, strict=not args.lenient, stats=stats)
    table = load_synonym_table(cfg.paths.synonyms) if cfg.paths.synonyms else {}
    cleaned = cleanse_labels(anns, table)
    kept = frequency_filter(cleaned, args.obj_min, args.pred_min)
    write_annotations(out / "cleansed.tsv", kept)
    print(f"read {len(anns)} (skipped {stats.get('skipped', 0)}), cleansed {len(cleaned)}, kept {len(kept)}")
    return 0


def cmd_train(cfg, args) -> int:
    from .data import Vocabulary, load_scenes
    from .model import ViPModel
    from .numerics import load_checkpoint, save_checkpoint
    from .training import train
    out = _out_dir(cfg)
    data = Path(cfg.paths.data)
    vocab = Vocabulary.load(data)
    scenes = load_scenes(data, data / "train.tsv")
    val_file = data / "val.tsv"
    val = load_scenes(data, val_file) if val_file.is_file() and val_file.stat().st_size else None
    model = ViPModel(_model_config(cfg, vocab))
    if cfg.train.stages == "2":
        if not cfg.paths.checkpoint:
            raise ConfigError("--stage 2 needs a stage-1 checkpoint (paths.checkpoint)")
        model.load_state_dict(load_checkpoint(cfg.paths.checkpoint), strict=False)
    tables = _embedding_tables(cfg, vocab) if cfg.loss.target_mode == "word-vector" else None
    tcfg = replace(cfg.train, seed=cfg.seed)
    result = train(scenes, vocab, model, tcfg, cfg.loss, cfg.proposal, val_scenes=val, eval_cfg=cfg.eval,
                   tables=tables, log_path=out / "metrics.jsonl", out_dir=out)
    save_checkpoint(out / "model.ckpt", model.state_dict())
    if result.stage1_state is not None:
        save_checkpoint(out / "stage1.ckpt", result.stage1_state)
    vocab.save(out)
    print(f"trained {len(scenes)} images; checkpoint {out / 'model.ckpt'}")
    if result.metrics:
        print(json.dumps(result.metrics[-1], sort_keys=True))
    return 0


def cmd_eval(cfg, args) -> int:
    from .data import Vocabulary, load_scenes
    from .evaluation import average_precision, write_detections, write_results
    from .model import ViPModel
    from .numerics import load_checkpoint
    from .pipeline import run_detection, score_run
    out = _out_dir(cfg)
    data = Path(cfg.paths.data)
    vocab = Vocabulary.load(data)
    if not cfg.paths.checkpoint:
        raise ConfigError("eval needs a checkpoint (paths.checkpoint or --checkpoint)")
    model = ViPModel(_model_config(cfg, vocab))
    model.load_state_dict(load_checkpoint(cfg.paths.checkpoint), strict=False)
    scenes = load_scenes(data, data / args.split)
    ecfg = replace(cfg.eval, seed=cfg.seed)
    run = run_detection(model, scenes, vocab, ecfg)
    results = score_run(run, ecfg)
    if args.ap:
        for c, name in enumerate(vocab.objects, 1):
            dets = [(d.image_id, box, d.score) for recs in run.detections.values() for d in recs
                    for lab, box in ((d.subject, d.subject_box), (d.object, d.object_box)) if lab == c]
            gt = {}
            for image_id, g in run.gts.items():
                boxes = [b for labs, sb, ob in zip(g.labels, g.subjects, g.objects)
                         for lab, b in ((labs[0], sb), (labs[2], ob)) if lab == c]
                gt[image_id] = _unique_rows(boxes)
            results[f"ap_{name}"] = average_precision(dets, gt)
    results["seconds"] = run.seconds
    write_results(out / "results.tsv", results)
    write_detections(out / "detections.tsv", run.detections)
    for k, v in results.items():
        print(f"{k}\t{'n/a' if v is None else f'{v:.4f}'}")
    return 0


def _unique_rows(boxes):
    import numpy as np
    if not boxes:
        return np.zeros((0, 4))
    arr = np.array(boxes)
    _, first = np.unique(arr, axis=0, return_index=True)
    return arr[np.sort(first)]


def cmd_nms_bench(cfg, args) -> int:
    from .bench import BenchConfig, run_benchmark
    from .data import Vocabulary
    from .model import ViPModel
    from .numerics import load_checkpoint
    out = _out_dir(cfg)
    vocab = Vocabulary.from_synth(cfg.synth)
    model = ViPModel(_model_config(cfg, vocab))
    if cfg.paths.checkpoint:
        model.load_state_dict(load_checkpoint(cfg.paths.checkpoint), strict=False)
    bcfg = BenchConfig(n_proposals=args.proposals, n_clusters=args.clusters,
                       threshold=cfg.eval.proposals.nms_threshold, image_size=cfg.model.image_size, seed=cfg.seed)
    report = run_benchmark(model, bcfg)
    with open(out / "nms_series.tsv", "w", encoding="utf-8") as fh:
        fh.write("threshold\tsurvivors\treduction\n")
        for t, n in report.series:
            fh.write(f"{t}\t{n}\t{report.n_triplets / max(n, 1)}\n")
    (out / "nms_bench.json").write_text(json.dumps(report.as_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"triplets {report.n_triplets} -> {report.n_survivors} at {bcfg.threshold} "
          f"(x{report.reduction:.1f}; reference figures 62,500 -> ~1,600)")
    print(f"pre-detection NMS {report.pre_seconds:.3f}s, post-detection NMS {report.post_seconds:.3f}s "
          f"(x{report.speedup:.1f})")
    return 0


def cmd_ablation(cfg, args) -> int:
    from .ablation import AblationConfig, run_ablation
    out = _out_dir(cfg)
    acfg = AblationConfig(n_train=args.n_train, n_test=args.n_test, seeds=tuple(args.seeds),
                          synth=replace(cfg.synth, seed=cfg.seed), model=cfg.model, train=cfg.train,
                          eval=cfg.eval)
    res = run_ablation(acfg, out)
    (out / "ablation.json").write_text(json.dumps(res, indent=1) + "\n", encoding="utf-8")
    for variant, row in res["median"].items():
        print(variant, " ".join(f"{k}={v:.4f}" for k, v in row.items()))
    return 0


# ------------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="seed for every random choice in the run")
    common.add_argument("--ablation", choices=("vip", "baseline", "no-tie"), help="model variant")
    common.add_argument("--nms", choices=("pre", "post", "off", "random-k"), help="triplet NMS placement")
    common.add_argument("--random-k", type=int, help="triplets sampled by --nms random-k")
    common.add_argument("--stage", choices=("1", "2", "1-only"), help="training stages to run")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data", help="dataset directory")
    common.add_argument("--checkpoint", help="model checkpoint to load")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vipcnn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--images", type=int, help="number of scenes")
    s.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    c = sub.add_parser("cleanse", parents=[common], help="cleanse and frequency-filter annotations")
    c.add_argument("input", help="annotation file")
    c.add_argument("--synonyms", help="raw<TAB>canonical table")
    c.add_argument("--obj-min", type=int, default=200)
    c.add_argument("--pred-min", type=int, default=400)
    c.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")
    sub.add_parser("train", parents=[common], help="two-stage training")
    e = sub.add_parser("eval", parents=[common], help="Rec@N evaluation")
    e.add_argument("--split", default="test.tsv", help="annotation file inside the dataset directory")
    e.add_argument("--ap", action="store_true", help="also report per-class object AP")
    b = sub.add_parser("nms-bench", parents=[common], help="triplet NMS reduction and placement timing")
    b.add_argument("--proposals", type=int, default=250)
    b.add_argument("--clusters", type=int, default=10)
    a = sub.add_parser("ablation", parents=[common], help="PMPS / tying ablation over seeds")
    a.add_argument("--n-train", type=int, default=2000)
    a.add_argument("--n-test", type=int, default=400)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    return p


def _overrides(args) -> dict:
    from .config import _parse_value
    upd: dict = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        upd[key.strip()] = _parse_value(val.strip())
    flags = {"seed": args.seed, "threads": args.threads, "variant": args.ablation, "paths.out": args.out,
             "paths.data": args.data, "paths.checkpoint": args.checkpoint, "eval.nms": args.nms,
             "eval.random_k": args.random_k, "train.stages": args.stage}
    if args.command == "synth":
        flags.update({"n_images": args.images, "fractions": args.fractions})
    if args.command == "cleanse":
        flags["paths.synonyms"] = args.synonyms
    upd.update({k: v for k, v in flags.items() if v is not None})
    return upd


def _base_config(command: str):
    """The ablation starts from its own scene set and schedule; other commands from the defaults."""
    from .config import RunConfig
    if command != "ablation":
        return None
    from .ablation import AblationConfig
    defaults = AblationConfig()
    return RunConfig(synth=defaults.synth, train=defaults.train)


COMMANDS = {"synth": lambda cfg, args: cmd_synth(cfg), "cleanse": cmd_cleanse, "train": cmd_train,
            "eval": cmd_eval, "nms-bench": cmd_nms_bench, "ablation": cmd_ablation}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.threads:
        _limit_threads(args.threads)
    from .config import load_config, save_config
    try:
        cfg = load_config(args.config, _overrides(args), base=_base_config(args.command))
        out = _out_dir(cfg)
        save_config(out / "resolved_config.txt", cfg)
        return COMMANDS[args.command](cfg, args)
    except NonFiniteLoss as exc:
        print(f"error: non-finite loss: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, InvalidInput, DimensionError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
