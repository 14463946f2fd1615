"""Command-line entry point: ``i3net <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import copm, gradcheck
from .autodiff import Tensor
from .synth import SceneSpec, read_ppm, write_dataset
from .train import (I3NetState, _head_prob_map, evaluate, format_report, load_config, pretrain_mlc, train,
                    _require)

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def cmd_synth(args) -> int:
    freqs = _floats(args.freq) if args.freq else None
    k = len(freqs) if freqs else args.classes
    spec = SceneSpec(args.domain, class_count=k, class_frequencies=freqs or tuple([1.0 / k] * k), seed=args.seed)
    ds = write_dataset(args.out, spec, args.count, start=args.start)
    n_obj = sum(len(a) for a in ds.annotations)
    print(f"wrote {len(ds)} {args.domain} images ({n_obj} objects) to {args.out}")
    return 0


def cmd_pretrain_mlc(args) -> int:
    cfg = load_config(args.config)
    out = args.out or cfg.mlc_checkpoint or "mlc.i3nt"
    state = I3NetState.build(cfg)
    source = _require(cfg.source_data, "source")
    pretrain_mlc(cfg, state, source, log=lambda rec: print(f"epoch {rec['epoch']}: mlc loss {rec['loss']:.6f}"))
    state.save(out)
    print(f"saved pretrained classifier to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.disable:
        cfg = cfg.with_disabled(args.disable.split(","))
    every = max(1, args.log_every)

    def show(rec):
        if rec["step"] % every == 0:
            print(f"epoch {rec['epoch']} step {rec['step']}: total {rec['total']:.4f} det {rec['l_det']:.4f}",
                  flush=True)

    res = train(cfg, args.out, on_metrics=show)
    print(f"final checkpoint: {Path(args.out) / 'checkpoint_final.i3nt'} ({len(res.metrics)} steps)")
    if cfg.test_data:
        report = evaluate(Path(args.out) / "checkpoint_final.i3nt", cfg.test_data)
        sys.stdout.write(format_report(report))
    return 0


def cmd_eval(args) -> int:
    text = format_report(evaluate(args.checkpoint, args.data))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    names = [args.op] if args.op else list(gradcheck.CHECKS)
    failed = False
    for name in names:
        err = gradcheck.run_all([name], seeds=args.seeds)[name]
        ok = err < gradcheck.TOLERANCE
        failed |= not ok
        print(f"{name:<10} max rel err {err:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_export_attention(args) -> int:
    state = I3NetState.load(args.checkpoint)
    model = state.model
    image = read_ppm(args.image)
    out = model.forward_with_taps(Tensor(image[None]))
    layer = model.config.layers[0]
    pmap = _head_prob_map(out.heads[layer].logits, model.tap_shapes(False)[layer])
    low = out.taps["low"]
    amap = copm.batch_attention(low, pmap, state.proj).data.reshape(low.shape[2:])
    copm.export_pgm(args.out, amap)
    print(f"wrote {amap.shape[0]}x{amap.shape[1]} attention map to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    from .experiment import ExperimentSettings, experiment_config, run_experiment

    settings = ExperimentSettings(seeds=tuple(int(s) for s in args.seeds.split(",")),
                                  train_images=args.train_images, test_images=args.test_images)
    base = load_config(args.config) if args.config else experiment_config()
    res = run_experiment(settings, base, args.out, log=lambda msg: print(msg, flush=True))
    sys.stdout.write(res.table())
    print(f"full - baseline: {100 * res.improvement():+.2f} mAP points")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="i3net", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    s.add_argument("--out", required=True)
    s.add_argument("--domain", choices=("source", "target"), required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--freq", help="comma-separated class frequencies, e.g. 0.6,0.3,0.1")
    s.add_argument("--classes", type=int, default=3, help="class count when --freq is omitted (uniform)")
    s.add_argument("--start", type=int, default=0, help="index of the first scene")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain-mlc", help="pretrain and freeze the multi-label classifier")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="checkpoint path (default: mlc_checkpoint from the config)")
    s.set_defaults(func=cmd_pretrain_mlc)

    s = sub.add_parser("train", help="run the joint adaptation schedule")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--disable", help="comma-separated components to switch off: dcbr,copm,rjca")
    s.add_argument("--log-every", type=int, default=50)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="per-class AP and mAP@0.5 of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", help="also write the report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference checks of the loss gradients")
    s.add_argument("--op", choices=sorted(gradcheck.CHECKS))
    s.add_argument("--seeds", type=int, default=100)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("export-attention", help="write the object-pattern attention map of one image as PGM")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_attention)

    s = sub.add_parser("experiment", help="baseline vs. full vs. ablations on generated data")
    s.add_argument("--out")
    s.add_argument("--config", help="base config (default: the desk-scale experiment schedule)")
    s.add_argument("--seeds", default="1,2,3")
    s.add_argument("--train-images", type=int, default=800)
    s.add_argument("--test-images", type=int, default=200)
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
