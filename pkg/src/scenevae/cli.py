"""Command-line entry point.

Every subcommand prints a JSON summary on stdout and writes its artifacts
under ``--out-dir``; progress logs go to stderr. Exit codes: 0 success,
1 runtime error, 2 usage error.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import bench, dataset, descriptors, probe, sampler, vae
from .rng import Rng

log = logging.getLogger("scenevae")


def _common():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="64-bit seed for every random stream")
    g.add_argument("--out-dir", default=".", help="directory for output artifacts")
    g.add_argument("--threads", type=int, default=1, help="BLAS worker threads")
    g.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    return p


def _images_source(p, required=True):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--manifest", help="CSV with header path,label,route")
    g.add_argument("--image-root", help="folder-per-class layout root/<label>/[<route>/]<image>")


def build_parser():
    common = _common()
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="scenevae", description="VAE global descriptors for scene categories",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common], formatter_class=fmt)

    p = add("gen-synthetic", "write a labelled synthetic scene corpus")
    p.add_argument("--n", type=int, default=100, help="images per class")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--noise", type=float, default=0.02, help="additive pixel noise std")

    p = add("train-vae", "train a VAE on a manifest of images")
    _images_source(p)
    p.add_argument("--image-size", type=int, default=64, choices=(64, 128), help="training resolution")
    p.add_argument("--latent-dim", type=int, default=128, help="descriptor length")
    p.add_argument("--variant", choices=vae.VARIANTS, default="dip", help="loss variant")
    p.add_argument("--lambda-d", type=float, default=50.0, help="DIP diagonal weight")
    p.add_argument("--lambda-od", type=float, default=5.0, help="DIP off-diagonal weight")
    p.add_argument("--recon-weight", type=float, default=1.0, help="reconstruction term weight")
    p.add_argument("--lr", type=float, default=0.005, help="Adam learning rate")
    p.add_argument("--max-epochs", type=int, default=500, help="epoch cap")
    p.add_argument("--patience", type=int, default=100, help="early-stopping patience (epochs)")
    p.add_argument("--batch-size", type=int, default=64, help="images per step")
    p.add_argument("--val-fraction", type=float, default=0.1, help="held-out validation share")
    p.add_argument("--out", default="vae.ckpt", help="checkpoint file name inside --out-dir")

    p = add("encode", "VAE descriptors (posterior means) for every image")
    p.add_argument("--model", required=True, help="VAE checkpoint")
    _images_source(p)
    p.add_argument("--out", default="vae.dsc1", help="descriptor file name inside --out-dir")
    p.add_argument("--batch-size", type=int, default=64, help="images per forward pass")

    p = add("phog", "PHOG descriptors for every image")
    _images_source(p)
    p.add_argument("--bins", type=int, default=60, help="orientation bins")
    p.add_argument("--levels", type=int, default=3, help="pyramid levels")
    p.add_argument("--orientation-range", type=int, default=360, choices=(180, 360), help="degrees")
    p.add_argument("--size", type=int, default=128, help="resize side before extraction")
    p.add_argument("--out", default="phog.dsc1", help="descriptor file name inside --out-dir")

    p = add("random-desc", "standard-normal descriptors, one per image")
    _images_source(p, required=False)
    p.add_argument("--count", type=int, help="number of descriptors when no images are given")
    p.add_argument("--dim", type=int, default=128, help="descriptor length")
    p.add_argument("--out", default="random.dsc1", help="descriptor file name inside --out-dir")

    p = add("train-probe", "fit the linear probe on labelled descriptors")
    p.add_argument("--descriptors", required=True, help="labelled DSC1 file")
    p.add_argument("--split", choices=("two-thirds", "none"), default="two-thirds",
                   help="per-route two-thirds train split, or train on everything")
    p.add_argument("--rounding", choices=("paper", "half_up"), default="paper",
                   help="per-route train count: floor(2n/3)+1, or nearest to 2n/3")
    p.add_argument("--epochs", type=int, default=100, help="full-batch epochs")
    p.add_argument("--lr", type=float, default=0.01, help="Adam learning rate")
    p.add_argument("--hidden", type=int, default=3, help="width between the two linear layers")
    p.add_argument("--out", default="probe.ckpt", help="probe file name inside --out-dir")

    p = add("eval", "accuracy and confusion of a probe on descriptors")
    p.add_argument("--probe", required=True, help="probe checkpoint")
    p.add_argument("--descriptors", required=True, help="labelled DSC1 file")
    p.add_argument("--split-file", help="split.json from train-probe; evaluates its test ids")
    p.add_argument("--name", default="descriptor", help="row name in the results table")
    p.add_argument("--type", default="", help="row type in the results table")
    p.add_argument("--bar", type=float, default=bench.GOOD_PERFORMANCE_BAR, help="good-performance bar (%%)")

    p = add("bench", "per-image descriptor latency")
    _images_source(p, required=False)
    p.add_argument("--synthetic", type=int, default=10, help="synthetic images when no source is given")
    p.add_argument("--kinds", default="random,phog,vae", help="comma-separated descriptor kinds")
    p.add_argument("--model", help="VAE checkpoint (an untrained 128x128 model is timed otherwise)")
    p.add_argument("--reps", type=int, default=30, help="timed repetitions (>= 30)")
    p.add_argument("--warmup", type=int, default=bench.WARMUP, help="untimed warmup calls")
    p.add_argument("--size", type=int, default=128, help="image side; resized before timing")
    p.add_argument("--dim", type=int, default=128, help="random descriptor length")
    p.add_argument("--median-of-means", action="store_true", help="also report the median of 5 group means")

    p = add("sample-poses", "sequential adaptive subsampling of a pose CSV")
    p.add_argument("--poses", required=True, help="CSV with header frame,timestamp,x,y,yaw")
    p.add_argument("--tau-d", type=float, default=5.0, help="accumulated distance threshold (m)")
    p.add_argument("--tau-theta-deg", type=float, default=15.0, help="accumulated heading threshold (deg)")
    p.add_argument("--yaw-degrees", action="store_true", help="yaw column is in degrees")

    p = add("traverse-latent", "decode a sweep over one latent dimension")
    p.add_argument("--model", required=True, help="VAE checkpoint")
    p.add_argument("--image", help="image whose latent is swept (zero latent otherwise)")
    p.add_argument("--dim", type=int, required=True, help="latent dimension to sweep")
    p.add_argument("--values", default="-3,-2,-1,0,1,2,3", help="comma-separated values")
    p.add_argument("--out", default="traverse.png", help="image file name inside --out-dir")
    return parser


# ---------------------------------------------------------------------------


def _samples(args):
    if args.manifest:
        return dataset.read_manifest(args.manifest)
    if args.image_root:
        return dataset.scan_folders(args.image_root)
    return None


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _labels_routes(samples):
    labels = [s.label for s in samples]
    routes = [s.route for s in samples]
    return (labels if any(l is not None for l in labels) else None,
            routes if any(r is not None for r in routes) else None)


def cmd_gen_synthetic(args):
    samples = bench.generate_synthetic_corpus(args.n, args.size, seed=args.seed, noise=args.noise)
    for s in samples:
        rel = os.path.join("images", dataset.LABELS[s.label], s.id + ".ppm")
        s.path = _out(args, rel)
        os.makedirs(os.path.dirname(s.path), exist_ok=True)
        dataset.write_image(s.path, s.pixels)
    manifest = _out(args, "manifest.csv")
    dataset.write_manifest(manifest, samples)
    return {"images": len(samples), "manifest": manifest}


def cmd_train_vae(args):
    samples = _samples(args)
    images = dataset.load_pixels(samples, args.image_size)
    vcfg = vae.VaeConfig(image_size=args.image_size, latent_dim=args.latent_dim, variant=args.variant,
                         lambda_d=args.lambda_d, lambda_od=args.lambda_od, recon_weight=args.recon_weight)
    tcfg = vae.TrainConfig(learning_rate=args.lr, max_epochs=args.max_epochs, patience=args.patience,
                           batch_size=args.batch_size, seed=args.seed, val_fraction=args.val_fraction)
    result = vae.train_vae(images, vcfg, tcfg)
    path = _out(args, args.out)
    vae.save_vae(result.model, path, extra={"best_epoch": result.best_epoch})
    hist_path = _out(args, "history.json")
    with open(hist_path, "w", encoding="utf-8") as fh:
        json.dump(result.history, fh, indent=1)
    return {"checkpoint": path, "history": hist_path, "best_epoch": result.best_epoch,
            "epochs_run": result.epochs_run, "best_val": result.best_val}


def cmd_encode(args):
    model = vae.load_vae(args.model)
    samples = _samples(args)
    images = dataset.load_pixels(samples, model.config.image_size)
    mu, _ = model.encode_batch(images, batch_size=args.batch_size)
    labels, routes = _labels_routes(samples)
    dset = descriptors.DescriptorSet(values=mu, ids=[s.id for s in samples], labels=labels, routes=routes,
                                     source="vae")
    path = _out(args, args.out)
    descriptors.save_descriptors(path, dset)
    return {"descriptors": path, "count": len(dset), "dim": int(mu.shape[1])}


def cmd_phog(args):
    cfg = descriptors.PhogConfig(args.bins, args.levels, args.orientation_range)
    samples = _samples(args)
    images = dataset.load_pixels(samples, args.size)
    vals = [descriptors.phog(descriptors.rgb_to_gray(img), cfg).values for img in images]
    labels, routes = _labels_routes(samples)
    dset = descriptors.DescriptorSet(values=np.stack(vals) if vals else np.zeros((0, cfg.length)),
                                     ids=[s.id for s in samples], labels=labels, routes=routes, source="phog")
    path = _out(args, args.out)
    descriptors.save_descriptors(path, dset)
    return {"descriptors": path, "count": len(dset), "dim": cfg.length}


def cmd_random_desc(args):
    samples = _samples(args)
    if samples is None:
        if args.count is None:
            raise UsageError("random-desc needs --manifest, --image-root or --count")
        ids, labels, routes = [str(i) for i in range(args.count)], None, None
    else:
        ids = [s.id for s in samples]
        labels, routes = _labels_routes(samples)
    rng = Rng(args.seed, "random-descriptor")
    vals = [descriptors.random_descriptor(args.dim, rng).values for _ in ids]
    dset = descriptors.DescriptorSet(values=np.stack(vals) if vals else np.zeros((0, args.dim)),
                                     ids=ids, labels=labels, routes=routes, source="random")
    path = _out(args, args.out)
    descriptors.save_descriptors(path, dset)
    return {"descriptors": path, "count": len(dset), "dim": args.dim}


def _split_samples(dset, seed, rounding):
    items = [dataset.ImageSample(id=i, route=r) for i, r in zip(dset.ids, dset.routes)]
    return dataset.split_two_thirds(items, seed, rounding)


def cmd_train_probe(args):
    dset = descriptors.load_descriptors(args.descriptors)
    if dset.labels is None or any(l is None for l in dset.labels):
        raise ValueError("train-probe: every descriptor needs a label")
    result = {}
    if args.split == "two-thirds":
        if dset.routes is None:
            raise ValueError("train-probe: two-thirds split needs route tags")
        split = _split_samples(dset, args.seed, args.rounding)
        split_path = _out(args, "split.json")
        with open(split_path, "w", encoding="utf-8") as fh:
            json.dump({"train": split.train_ids, "test": split.test_ids}, fh, indent=1)
        train = dset.subset(split.train_ids)
        result.update(split=split_path, n_test=len(split.test_ids))
    else:
        train = dset
    model, history = probe.train_probe(train.values, train.labels, epochs=args.epochs, lr=args.lr,
                                       seed=args.seed, hidden=args.hidden)
    path = _out(args, args.out)
    probe.save_probe(model, path)
    result.update(probe=path, n_train=len(train), final_loss=history[-1] if history else None,
                  train_accuracy=bench.evaluate(model, train.values, train.labels).accuracy)
    return result


def cmd_eval(args):
    model = probe.load_probe(args.probe)
    dset = descriptors.load_descriptors(args.descriptors)
    if args.split_file:
        with open(args.split_file, encoding="utf-8") as fh:
            dset = dset.subset(json.load(fh)["test"])
    if dset.labels is None:
        raise ValueError("eval: descriptors carry no labels")
    report = bench.evaluate(model, dset.values, dset.labels)
    summary = {**json.loads(report.to_json()), "passes_bar": bench.passes_bar(report.accuracy, args.bar)}
    with open(_out(args, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    table = bench.format_table([{"descriptor": args.name, "type": args.type, "dimensions": dset.dim,
                                 "accuracy": report.accuracy}])
    with open(_out(args, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    return summary


def cmd_bench(args):
    samples = _samples(args)
    if samples is None:
        images = np.stack([s.pixels for s in bench.generate_synthetic_corpus(
            max(1, math.ceil(args.synthetic / 3)), args.size, seed=args.seed)][:args.synthetic])
    else:
        images = dataset.load_pixels(samples, args.size)
    images = np.stack([dataset.resize_bilinear(img, args.size) for img in images])
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    results, rows = {}, []
    for kind in kinds:
        kw = {}
        if kind == "vae":
            kw["model"] = vae.load_vae(args.model) if args.model else vae.VAE(
                vae.VaeConfig(image_size=args.size), seed=args.seed).eval()
            dim = kw["model"].config.latent_dim
        elif kind == "phog":
            dim = descriptors.PhogConfig().length
        else:
            kw["dim"] = args.dim
            kw["rng"] = Rng(args.seed, "bench-random")
            dim = args.dim
        r = bench.bench_descriptor(kind, images, reps=args.reps, warmup=args.warmup,
                                   median_of_means=args.median_of_means, **kw)
        results[kind] = vars(r)
        rows.append({"descriptor": kind, "dimensions": dim, "mean_us": r.mean_us, "std_us": r.std_us})
    with open(_out(args, "bench.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1)
    with open(_out(args, "bench.txt"), "w", encoding="utf-8") as fh:
        fh.write(bench.format_table(rows))
    return results


def cmd_sample_poses(args):
    poses = sampler.read_pose_csv(args.poses, yaw_degrees=args.yaw_degrees)
    cfg = sampler.SamplerConfig(tau_d_acc=args.tau_d, tau_theta_acc=math.radians(args.tau_theta_deg))
    idx = sampler.adaptive_subsample(poses, cfg)
    path = _out(args, "selected.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame\n" + "".join(f"{i}\n" for i in idx))
    return {"selected": idx, "count": len(idx), "of": len(poses), "file": path}


def cmd_traverse_latent(args):
    model = vae.load_vae(args.model)
    if args.image:
        img = dataset.resize_bilinear(dataset.read_image(args.image), model.config.image_size)
        z = vae.encode(img, model).z
    else:
        z = np.zeros(model.config.latent_dim, dtype=np.float32)
    values = [float(v) for v in args.values.split(",") if v.strip()]
    path = _out(args, args.out)
    vae.latent_traverse(z, args.dim, values, model, path=path)
    return {"image": path, "tiles": len(values), "dim": args.dim}


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train-vae": cmd_train_vae,
    "encode": cmd_encode,
    "phog": cmd_phog,
    "random-desc": cmd_random_desc,
    "train-probe": cmd_train_probe,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sample-poses": cmd_sample_poses,
    "traverse-latent": cmd_traverse_latent,
}


class UsageError(Exception):
    pass


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            summary = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # noqa: BLE001 - surface any runtime failure as exit 1
        log.error("%s failed: %s", args.command, exc)
        if args.verbose:
            raise
        return 1
    print(json.dumps(summary, default=_json_default, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
