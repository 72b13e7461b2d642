"""End-to-end desk-scale run on the synthetic corpus.

Trains a VAE on unlabeled training images, freezes it, and compares linear
probes on VAE posterior means, PHOG and random descriptors.
"""

import logging
import time

import numpy as np

from .bench import bench_descriptor, evaluate, format_table, generate_synthetic_corpus
from .dataset import resize_bilinear
from .descriptors import PhogConfig, phog, random_descriptor, rgb_to_gray
from .probe import train_probe
from .rng import Rng
from .vae import TrainConfig, VaeConfig, train_vae

log = logging.getLogger(__name__)


def random_probe_accuracy(train_labels, test_labels, dim=128, seeds=range(5), epochs=100):
    """Test accuracy of probes on pure-noise descriptors, one entry per seed."""
    accs = []
    for seed in seeds:
        rng = Rng(seed, "random-descriptor")
        tr = np.stack([random_descriptor(dim, rng).values for _ in train_labels])
        te = np.stack([random_descriptor(dim, rng).values for _ in test_labels])
        probe, _ = train_probe(tr, train_labels, epochs=epochs, seed=seed)
        accs.append(evaluate(probe, te, test_labels).accuracy)
    return accs


def run_desk_experiment(n_train_per_class=100, n_test_per_class=50, image_size=64, epochs=50,
                        latent_dim=128, variant="dip", batch_size=64, seed=0, bench_reps=30):
    t0 = time.perf_counter()
    train = generate_synthetic_corpus(n_train_per_class, image_size, seed=seed)
    test = generate_synthetic_corpus(n_test_per_class, image_size, seed=seed + 1)
    x_tr = np.stack([s.pixels for s in train])
    x_te = np.stack([s.pixels for s in test])
    y_tr = [s.label for s in train]
    y_te = [s.label for s in test]

    vcfg = VaeConfig(image_size=image_size, latent_dim=latent_dim, variant=variant)
    tcfg = TrainConfig(max_epochs=epochs, patience=min(100, epochs), batch_size=batch_size, seed=seed)
    result = train_vae(x_tr, vcfg, tcfg)
    model = result.model
    t_train = time.perf_counter() - t0

    mu_tr, _ = model.encode_batch(x_tr)
    mu_te, _ = model.encode_batch(x_te)
    vae_probe, _ = train_probe(mu_tr, y_tr, seed=seed)
    vae_report = evaluate(vae_probe, mu_te, y_te)

    cfg = PhogConfig()
    ph_tr = np.stack([phog(rgb_to_gray(s.pixels), cfg).values for s in train])
    ph_te = np.stack([phog(rgb_to_gray(s.pixels), cfg).values for s in test])
    phog_probe, _ = train_probe(ph_tr, y_tr, seed=seed)
    phog_report = evaluate(phog_probe, ph_te, y_te)

    rand_accs = random_probe_accuracy(y_tr, y_te)

    timings = {}
    if bench_reps:
        big = np.stack([resize_bilinear(s.pixels, 128) for s in test[:: max(1, len(test) // 10)]])
        timings["random"] = bench_descriptor("random", big, reps=bench_reps)
        timings["phog"] = bench_descriptor("phog", big, reps=bench_reps)
        # latency is measured on the deployment resolution
        timings["vae"] = bench_descriptor("vae", big, reps=bench_reps,
                                          model=_untrained_like(model.config, 128, seed))

    rows = [
        {"descriptor": "Random", "type": "Trivial", "dimensions": 128,
         "accuracy": float(np.mean(rand_accs)), **_t(timings, "random")},
        {"descriptor": "PHOG", "type": "Hand-crafted", "dimensions": cfg.length,
         "accuracy": phog_report.accuracy, **_t(timings, "phog")},
        {"descriptor": f"{variant.upper()}VAE" if variant == "dip" else "VAE", "type": "Unsupervised",
         "dimensions": latent_dim, "accuracy": vae_report.accuracy, **_t(timings, "vae")},
    ]
    return {
        "vae_accuracy": vae_report.accuracy,
        "vae_report": vae_report,
        "phog_accuracy": phog_report.accuracy,
        "random_accuracies": rand_accs,
        "random_accuracy_mean": float(np.mean(rand_accs)),
        "history": result.history,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "train_seconds": t_train,
        "wall_seconds": time.perf_counter() - t0,
        "timings": timings,
        "table": format_table(rows),
        "model": model,
    }


def _t(timings, kind):
    r = timings.get(kind)
    return {} if r is None else {"mean_us": r.mean_us, "std_us": r.std_us}


def _untrained_like(config, image_size, seed):
    from .vae import VAE

    cfg = VaeConfig(image_size=image_size, latent_dim=config.latent_dim, variant=config.variant)
    return VAE(cfg, seed=seed).eval()
