"""Command-line entry point: ``ssc3od <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 run failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import nn
from .config import TEST_FIRST_ID, TEST_SEED_OFFSET, ConfigError, ExperimentSpec, load_spec
from .evaluation import evaluate_detector, report_csv
from .experiment import csv_text, run_experiment
from .mae import MaeConfig, pretrain
from .mining import MiningConfig, TrainConfig, format_bank, init_bank, new_detector, train_detector, train_ssc3od
from .render import render_scene
from .scene import CorpusConfig, generate_corpus, load_split, save_dataset, sparsify

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3
FUSIONS = ("maxout", "attention", "graph")

log = logging.getLogger("ssc3od")


class InputError(Exception):
    """Bad input file or flag combination (exit code 2)."""


def _load(data_dir, split):
    try:
        return load_split(data_dir, split)
    except FileNotFoundError:
        raise InputError(f"no {split} split under {data_dir} (run `gen` first)") from None
    except ValueError as e:
        raise InputError(f"{data_dir}: {e}") from None


def _ckpt(path):
    try:
        return nn.load_checkpoint(path)
    except FileNotFoundError:
        raise InputError(f"checkpoint {path} not found") from None
    except ValueError as e:
        raise InputError(str(e)) from None


# ------------------------------------------------------------- subcommands --

def cmd_gen(a) -> int:
    cfg = CorpusConfig(num_scenes=a.scenes, agents_min=a.agents_min, agents_max=a.agents_max, num_objects=a.objects)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    train = sparsify(generate_corpus(cfg, a.seed), a.seed)
    test_cfg = CorpusConfig(num_scenes=a.test_scenes, agents_min=a.agents_min, agents_max=a.agents_max,
                            num_objects=a.objects)
    test = generate_corpus(test_cfg, TEST_SEED_OFFSET + a.seed, "test", TEST_FIRST_ID)
    save_dataset(train, out / "train.scenes")
    save_dataset(test, out / "test.scenes")
    print(f"wrote {len(train.scenes)} train and {len(test.scenes)} test scenes to {out}")
    return EXIT_OK


def cmd_pretrain(a) -> int:
    ds = _load(a.data, "train")
    res = pretrain(ds, MaeConfig(r_m=a.mask_ratio, epochs=a.epochs, dtype=a.dtype), seed=a.seed)
    nn.save_checkpoint(a.out, res.model.state())
    curve = Path(a.curve) if a.curve else Path(a.out).with_suffix(".csv")
    curve.write_text(csv_text(["epoch", "loss"], [[e, repr(v)] for e, v in enumerate(res.epoch_loss)]))
    print(f"final loss {res.epoch_loss[-1] if res.epoch_loss else float('nan'):.6f}, "
          f"constant baseline {res.baseline_loss:.6f}")
    return EXIT_OK


def cmd_train(a) -> int:
    ds = _load(a.data, "train")
    tc = TrainConfig(epochs=a.epochs, dtype=a.dtype)
    if ds.sparse is None and a.labels == "sparse":
        raise InputError("the train split carries no sparse labels")
    encoder = None if a.init == "scratch" else _ckpt(a.init)
    model = new_detector(a.fusion, a.seed, tc, encoder, ds)
    bank = init_bank({sc.scene_id: ds.label_boxes(sc.scene_id, a.labels) for sc in ds.scenes})
    losses = train_detector(model, ds, bank, tc, a.seed)
    nn.save_checkpoint(a.out, model.state())
    print(f"final loss {losses[-1] if losses else float('nan'):.6f}")
    return EXIT_OK


def cmd_mine_train(a) -> int:
    ds = _load(a.data, "train")
    if a.mae is None and not a.scratch:
        raise InputError("--mae is required (or pass --scratch to train from scratch)")
    encoder = _ckpt(a.mae) if a.mae else None
    tc = TrainConfig(epochs=a.epochs, dtype=a.dtype)
    mc = MiningConfig(tau_cls=a.tau_cls, tau_iou=a.tau_iou, epochs=a.epochs)
    res = train_ssc3od(ds, encoder, a.fusion, a.seed, tc, mc, allow_scratch=a.scratch)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(out / "teacher.ckpt", res.teacher.state())
    nn.save_checkpoint(out / "student.ckpt", res.student.state())
    (out / "bank.txt").write_text(format_bank(res.bank))
    (out / "mining.csv").write_text(res.report.csv())
    last = res.report.rows[-1]
    print(f"bank {last[1]} boxes, mined precision {last[2]:.3f}, recall {last[3]:.3f}")
    return EXIT_OK


def _detector_from(path, fusion, dtype="float64"):
    model = new_detector(fusion, 0, TrainConfig(dtype=dtype))
    try:
        model.load(_ckpt(path))
    except KeyError as e:
        raise InputError(f"{path} does not match a {fusion} detector: {e}") from None
    return model


def cmd_eval(a) -> int:
    ds = _load(a.data, a.split)
    model = _detector_from(a.ckpt, a.fusion)
    report = evaluate_detector(model, ds, a.regime)
    text = report_csv([report])
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_render(a) -> int:
    ds = _load(a.data, a.split)
    try:
        sc = ds.scene(a.scene)
    except KeyError:
        raise InputError(f"scene {a.scene} not in the {a.split} split") from None
    ego = sc.agent_ids[0] if a.ego is None else a.ego
    if ego not in sc.agent_ids:
        raise InputError(f"scene {a.scene} has no agent {ego}")
    dets = []
    model = None
    if a.ckpt:
        from .collab import build_sample
        model = _detector_from(a.ckpt, a.fusion)
        dets = model.detect(build_sample(sc, ego, model.grid)).boxes
    from .evaluation import ground_truth
    from .pillars import GridConfig
    grid = model.grid if model else GridConfig()
    canvas = render_scene(sc, ego, (grid.x_min, grid.x_max, grid.y_min, grid.y_max), dets,
                          ground_truth(sc, ego, grid), size=(a.size, a.size))
    canvas.save(a.out)
    print(f"wrote {a.out} ({len(dets)} detections)")
    return EXIT_OK


def cmd_experiment(a) -> int:
    spec = load_spec(a.config) if a.config else ExperimentSpec()
    over = {
        "seeds": tuple(a.seeds) if a.seeds else None,
        "fusions": tuple(a.fusions) if a.fusions else None,
        "regimes": tuple(a.regimes) if a.regimes else None,
        "epochs": a.epochs, "mae_epochs": a.mae_epochs, "r_m": a.r_m, "tau_cls": a.tau_cls, "tau_iou": a.tau_iou,
        "train_scenes": a.train_scenes, "test_scenes": a.test_scenes,
    }
    try:
        spec = ExperimentSpec(**{**spec.__dict__, **{k: v for k, v in over.items() if v is not None}})
    except TypeError as e:
        raise ConfigError(str(e)) from None
    result = run_experiment(spec, a.out, force=a.force)
    sys.stdout.write(result.text())
    for fusion, regime, seed, msg in result.failures:
        print(f"FAILED {fusion}/{regime}/seed{seed}: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_RUN


# ------------------------------------------------------------------ parser --

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssc3od", description="Sparse-label collaborative BEV detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic train/test corpus")
    g.add_argument("--scenes", type=int, default=64)
    g.add_argument("--test-scenes", type=int, default=48)
    g.add_argument("--agents-min", type=int, default=1)
    g.add_argument("--agents-max", type=int, default=3)
    g.add_argument("--objects", type=int, default=12)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    def common(q, seed=True):
        q.add_argument("--data", required=True, help="directory written by `gen`")
        if seed:
            q.add_argument("--seed", type=int, default=0)
        q.add_argument("--dtype", choices=("float32", "float64"), default="float32")

    q = sub.add_parser("pretrain", help="masked-pillar occupancy pretraining")
    common(q)
    q.add_argument("--epochs", type=int, default=25)
    q.add_argument("--mask-ratio", type=float, default=0.7)
    q.add_argument("--out", required=True, help="checkpoint path")
    q.add_argument("--curve", help="loss CSV path (default: checkpoint path with .csv)")
    q.set_defaults(func=cmd_pretrain)

    q = sub.add_parser("train", help="supervised detector training")
    common(q)
    q.add_argument("--fusion", choices=FUSIONS, default="maxout")
    q.add_argument("--init", default="scratch", help="pretraining checkpoint or 'scratch'")
    q.add_argument("--epochs", type=int, default=10)
    q.add_argument("--labels", choices=("full", "sparse"), default="sparse")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("mine-train", help="teacher/student training with online instance mining")
    common(q)
    q.add_argument("--mae", help="pretraining checkpoint")
    q.add_argument("--scratch", action="store_true", help="allow training without a pretrained encoder")
    q.add_argument("--fusion", choices=FUSIONS, default="maxout")
    q.add_argument("--tau-cls", type=float, default=0.3)
    q.add_argument("--tau-iou", type=float, default=0.15)
    q.add_argument("--epochs", type=int, default=10)
    q.add_argument("--out", required=True, help="output directory")
    q.set_defaults(func=cmd_mine_train)

    q = sub.add_parser("eval", help="AP at IoU 0.3/0.5/0.7 on a split")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--split", default="test", choices=("train", "test"))
    q.add_argument("--fusion", choices=FUSIONS, default="maxout")
    q.add_argument("--regime", default="")
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("render", help="BEV image of a scene as a binary PPM")
    q.add_argument("--data", required=True)
    q.add_argument("--split", default="test", choices=("train", "test"))
    q.add_argument("--scene", type=int, required=True)
    q.add_argument("--ego", type=int)
    q.add_argument("--ckpt", help="detector checkpoint whose outputs are drawn in red")
    q.add_argument("--fusion", choices=FUSIONS, default="maxout")
    q.add_argument("--size", type=int, default=640)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_render)

    q = sub.add_parser("experiment", help="regime comparison sweep (resumable)")
    q.add_argument("--config", help="experiment file; flags below override it")
    q.add_argument("--out", required=True)
    q.add_argument("--seeds", type=int, nargs="+")
    q.add_argument("--fusions", nargs="+", choices=FUSIONS)
    q.add_argument("--regimes", nargs="+")
    q.add_argument("--epochs", type=int)
    q.add_argument("--mae-epochs", type=int)
    q.add_argument("--train-scenes", type=int)
    q.add_argument("--test-scenes", type=int)
    q.add_argument("--r-m", type=float)
    q.add_argument("--tau-cls", type=float)
    q.add_argument("--tau-iou", type=float)
    q.add_argument("--force", action="store_true", help="recompute and overwrite completed runs")
    q.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - any training failure maps to the run-failure exit code
        log.debug("run failed", exc_info=True)
        print(f"run failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
