"""Experiment commands.

Each command is a pure function of its resolved configuration: it derives
every random draw from explicit seeds, writes its outputs (CSV, PNG,
metadata) under one output directory, and echoes the resolved config next
to them.  Rerunning with the same config reproduces the CSVs byte for byte.
"""

import json
import math
import os
import sys

import numpy as np

from . import data as data_mod
from . import imageops
from .denoisers import (
    MixtureDenoiser,
    denoised_estimate,
    empirical_denoiser,
    load_mixture,
    predict_epsilon_batch,
)
from .rng import generator
from .samplers import (
    QuadraticTarget,
    SamplerConfig,
    guided_step,
    img2img_init,
    naive_pixel_descent,
    pgd_step,
    run_sampler,
)
from .schedule import GuidanceWeights, alpha, gamma_t, make_schedule
from .surrogate import evaluate, extract_features, fit_ridge, init_random_features, load_model, make_model, save_model

__all__ = [
    "cmd_gen_data",
    "cmd_train",
    "cmd_eval",
    "cmd_sample",
    "cmd_redesign",
    "cmd_robustness",
    "cmd_check_equivalence",
    "cmd_naive_descent",
]

STEP_TOL = 1e-9
TRAJ_TOL = 1e-7


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def echo_config(out_dir, config):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved_config.json"), "w") as fh:
        json.dump(config, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _save_image(image, path, meta, name):
    """Affine-map an arbitrary-range image into [0, 1] for PNG export and
    record the (lo, hi) range in the run's sidecar metadata."""
    arr = np.asarray(image, dtype=float)
    lo = float(arr.min())
    hi = float(arr.max())
    span = hi - lo if hi > lo else 1.0
    imageops.save_png((arr - lo) / span, path)
    meta[name] = {"lo": lo, "hi": hi}


def _write_image_meta(out_dir, meta):
    with open(os.path.join(out_dir, "images_meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _load_records(path):
    records = data_mod.load_dataset(path)
    if not records:
        raise ValueError(f"dataset {path} is empty")
    return records


def _guidable_model(path):
    model = load_model(path)
    if not model.guidable:
        raise ValueError(
            "this command needs an image-input (guidable) model; the given "
            "model predicts from precomputed features only"
        )
    return model


def _resize_all(records, side):
    out = []
    for rec in records:
        img = rec.image
        if img.shape[1:] != (side, side):
            img = imageops.resize_bilinear(img, side, side)
        out.append(img)
    return out


def cmd_gen_data(config):
    """Write a synthetic vehicle dataset (labels.csv + images/)."""
    out = config["out"]
    echo_config(out, config)
    records = data_mod.synth_vehicle_dataset(config["n"], config["seed"], side=config["side"])
    data_mod.save_dataset(records, out)
    return {"n": len(records)}


def cmd_train(config):
    """Fit the ridge head on (optionally 10x-augmented) training features.

    Deterministic 80/20 split by id hash; the test metrics come from the
    evaluate() contract on clean test images, the train metrics from the
    fitted feature matrix.
    """
    out = config["out"]
    echo_config(out, config)
    records = _load_records(config["data"])
    train, test = data_mod.split_by_id_hash(records)
    if not train:
        raise ValueError("id-hash split left the training set empty")

    ex = init_random_features(config["feature_seed"], config["channels"])
    side = ex.input_side

    def features(img):
        if img.shape[1:] != (side, side):
            img = imageops.resize_bilinear(img, side, side)
        return extract_features(ex, img, dtype=np.float32)

    per = data_mod.AUGMENTATIONS_PER_RECORD if config["augment"] else 1
    X = np.empty((len(train) * per, ex.feature_dim))
    y = np.empty(len(train) * per)
    i = 0
    for ri, rec in enumerate(train):
        if config["augment"]:
            for child in data_mod.augment(rec, config["augment_seed"], ri):
                X[i] = features(child.image)
                y[i] = child.drag_label
                i += 1
        else:
            X[i] = features(rec.image)
            y[i] = rec.drag_label
            i += 1

    fit = fit_ridge(X, y, config["lam"], standardize=config["standardize"])
    model = make_model(ex, fit, config["lam"])
    model_path = config["out_model"] or os.path.join(out, "model.json")
    save_model(model, model_path)

    train_pred = model.predict_features(X)
    train_mse = float(np.mean((train_pred - y) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    train_r2 = float("nan") if ss_tot == 0 else 1.0 - float(np.sum((train_pred - y) ** 2)) / ss_tot

    if test:
        test_r2, test_mse = evaluate(model, [(rec.image, rec.drag_label) for rec in test])
    else:
        test_r2, test_mse = float("nan"), float("nan")

    if math.isnan(train_r2) or math.isnan(test_r2):
        print("warning: R^2 undefined (degenerate labels)", file=sys.stderr)

    write_csv(
        os.path.join(out, "metrics.csv"),
        ["train_r2", "train_mse", "test_r2", "test_mse"],
        [[train_r2, train_mse, test_r2, test_mse]],
    )
    return {
        "model_path": model_path,
        "train_rows": len(y),
        "test_rows": len(test),
        "train_r2": train_r2,
        "train_mse": train_mse,
        "test_r2": test_r2,
        "test_mse": test_mse,
    }


def cmd_eval(config):
    """R^2 / MSE of a saved model over a dataset directory."""
    out = config["out"]
    echo_config(out, config)
    model = load_model(config["model"])
    records = _load_records(config["data"])
    if model.guidable:
        r2, mse = evaluate(model, [(rec.image, rec.drag_label) for rec in records])
    else:
        preds = np.array([model.predict_id(rec.id) for rec in records])
        labels = np.array([rec.drag_label for rec in records])
        mse = float(np.mean((preds - labels) ** 2))
        ss_tot = float(np.sum((labels - labels.mean()) ** 2))
        r2 = float("nan") if ss_tot == 0 else 1.0 - float(np.sum((preds - labels) ** 2)) / ss_tot
    write_csv(os.path.join(out, "eval.csv"), ["r2", "mse", "n"], [[r2, mse, len(records)]])
    return {"r2": r2, "mse": mse, "n": len(records)}


def _empirical_from_config(config, records, side):
    limit = config.get("max_components") or len(records)
    return empirical_denoiser(_resize_all(records[:limit], side))


def cmd_sample(config):
    """Paired baseline (eta0 = 0) and guided generation from shared starts.

    Pair i noises dataset image i (cycling) up to sigma_max; both members of
    the pair then denoise from that identical state, so any difference in the
    recorded drag curves comes from guidance alone.  Starting from noised
    data rather than pure noise keeps the pairs spread across the dataset's
    basins instead of all collapsing into the posterior's dominant one.
    """
    out = config["out"]
    echo_config(out, config)
    model = _guidable_model(config["model"])
    records = _load_records(config["data"])
    side = config["size"]
    limit = config.get("max_components") or len(records)
    images = _resize_all(records[:limit], side)
    denoiser = empirical_denoiser(images)
    sched = make_schedule(
        config["schedule"], config["T"], config["sigma_min"], config["sigma_max"]
    )

    variants = (
        ("baseline", GuidanceWeights(eta0=0.0, cfg_w=config["cfg_scale"], ge_gamma=config["ge_gamma"])),
        ("guided", GuidanceWeights(eta0=config["eta0"], cfg_w=config["cfg_scale"], ge_gamma=config["ge_gamma"])),
    )

    track_rows = []
    summary_rows = []
    meta = {}
    for pair in range(config["n_pairs"]):
        base = images[pair % len(images)]
        init = img2img_init(base, config["sigma_max"], config["seed"], pair)
        finals = {}
        for name, weights in variants:
            cfg = SamplerConfig(
                schedule=sched,
                weights=weights,
                sampler_kind=config["sampler"],
                seed=config["seed"],
            )
            traj = run_sampler(denoiser, model, cfg, init)
            for t, phi in traj.drag_track:
                track_rows.append([pair, name, t, float(sched.sigmas[t]), phi])
            finals[name] = float(model.predict(traj.final))
            _save_image(
                traj.final,
                os.path.join(out, f"pair{pair:03d}_{name}.png"),
                meta,
                f"pair{pair:03d}_{name}.png",
            )
        summary_rows.append([pair, finals["baseline"], finals["guided"]])

    write_csv(
        os.path.join(out, "drag_track.csv"),
        ["pair", "variant", "t", "sigma_t", "phi"],
        track_rows,
    )
    write_csv(
        os.path.join(out, "summary.csv"),
        ["pair", "baseline_final_phi", "guided_final_phi"],
        summary_rows,
    )
    _write_image_meta(out, meta)
    deltas = [row[2] - row[1] for row in summary_rows]
    return {
        "n_pairs": config["n_pairs"],
        "mean_guided_minus_baseline": float(np.mean(deltas)),
        "frac_improved": float(np.mean([d < 0 for d in deltas])),
    }


def cmd_redesign(config):
    """Image-to-image redesign sweeps over sigma_T.

    Each run noises the reference to sigma_T and samples back down with
    guidance; sigma_T = 0 is the identity (zero steps).  The drag CSV
    carries the reference's predicted drag so every run's starting point is
    explicit.
    """
    out = config["out"]
    echo_config(out, config)
    model = _guidable_model(config["model"])
    reference = imageops.load_png(config["reference"])
    records = _load_records(config["data"])
    side = reference.shape[1]
    if reference.shape[1] != reference.shape[2]:
        raise ValueError(f"reference must be square, got {reference.shape}")
    denoiser = _empirical_from_config(config, records, side)
    phi_ref = float(model.predict(reference))

    sigma_list = config["sigma_T"]
    seeds = config["seeds"]
    track_rows = []
    summary_rows = []
    meta = {}
    for si, sigma_T in enumerate(sigma_list):
        for seed in seeds:
            if sigma_T == 0.0:
                final = reference.copy()
                track_rows.append([sigma_T, seed, config["T"], 0.0, phi_ref, phi_ref])
            else:
                sched = make_schedule(config["schedule"], config["T"], 0.0, sigma_T)
                init = img2img_init(reference, sigma_T, config["seed"], si, seed)
                cfg = SamplerConfig(
                    schedule=sched,
                    weights=GuidanceWeights(
                        eta0=config["eta0"], cfg_w=config["cfg_scale"], ge_gamma=config["ge_gamma"]
                    ),
                    sampler_kind=config["sampler"],
                    seed=seed,
                )
                traj = run_sampler(denoiser, model, cfg, init)
                for t, phi in traj.drag_track:
                    track_rows.append([sigma_T, seed, t, float(sched.sigmas[t]), phi, phi_ref])
                final = traj.final
            dev = float(np.mean(np.abs(final - reference)))
            summary_rows.append([sigma_T, seed, float(model.predict(final)), dev])
            name = f"sigma{si}_seed{seed}.png"
            _save_image(final, os.path.join(out, name), meta, name)

    write_csv(
        os.path.join(out, "drag_track.csv"),
        ["sigma_T", "seed", "t", "sigma_t", "phi", "phi_reference"],
        track_rows,
    )
    write_csv(
        os.path.join(out, "summary.csv"),
        ["sigma_T", "seed", "phi_final", "mean_abs_dev"],
        summary_rows,
    )
    _write_image_meta(out, meta)
    return {"phi_reference": phi_ref, "runs": len(summary_rows)}


def cmd_robustness(config):
    """Prediction MSE on one-shot denoised estimates across noise levels.

    For each sigma: noise every dataset image, denoise it in one shot with
    the configured denoiser, predict drag, and report the MSE against the
    clean labels.  sigma = 0 bypasses the denoiser, so that row equals the
    model's clean MSE exactly.
    """
    out = config["out"]
    echo_config(out, config)
    model = _guidable_model(config["model"])
    records = _load_records(config["data"])
    side = records[0].image.shape[1]
    images = np.stack(_resize_all(records, side))
    labels = np.array([rec.drag_label for rec in records])

    if config.get("mixture"):
        denoiser = load_mixture(config["mixture"], dataset_dir=config["data"])
    else:
        denoiser = _empirical_from_config(config, records, side)

    rows = []
    for li, sigma in enumerate(config["noise_levels"]):
        sigma = float(sigma)
        if sigma == 0.0:
            den = images
        else:
            noise = np.stack(
                [generator(config["seed"], li, i).standard_normal(images.shape[1:]) for i in range(len(records))]
            )
            noisy = images + sigma * noise
            eps = predict_epsilon_batch(denoiser, noisy, sigma)
            den = denoised_estimate(noisy, sigma, eps)
        preds = np.array([model.predict(img) for img in den])
        mse = float(np.mean((preds - labels) ** 2))
        rows.append([sigma, mse, len(records)])

    write_csv(os.path.join(out, "robustness.csv"), ["sigma", "mse", "n"], rows)
    return {"mse_by_sigma": [(r[0], r[1]) for r in rows]}


def _rel_dev(a, b):
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
    return float(np.max(np.abs(a - b))) / scale


def cmd_check_equivalence(config):
    """Numerical audit that the guided step and its projected-gradient form
    are the same map: per-step on random inputs and over full trajectories.

    Exits nonzero (via the returned ok flag) when any deviation exceeds the
    1e-9 per-step / 1e-7 trajectory tolerances.
    """
    out = config["out"]
    echo_config(out, config)
    shape = (3, 8, 8)
    T = config["T"]
    eta0_grid = [0.0, 1.0, 400.0]

    audit_rows = []
    max_step_dev = 0.0
    max_traj_dev = 0.0
    for ci in range(config["n_configs"]):
        rng = generator(config["seed"], ci)
        sigma_max = float(rng.uniform(2.0, 8.0))
        sched = make_schedule("log_linear", T, 0.0, sigma_max)
        weights = GuidanceWeights(eta0=eta0_grid[ci % len(eta0_grid)])

        # per-step agreement on raw random inputs
        step_dev = 0.0
        for t in range(T, 0, -1):
            x = rng.standard_normal(shape)
            eps = rng.standard_normal(shape)
            g = rng.standard_normal(shape) * 1e-3
            a = guided_step(x, t, sched, eps, g, weights)
            b = pgd_step(x, t, sched, eps, g, weights)
            step_dev = max(step_dev, _rel_dev(a, b))

        # full-trajectory agreement with an exact mixture denoiser and a
        # quadratic target
        K = int(rng.integers(1, 5))
        den = MixtureDenoiser(
            [rng.standard_normal(shape) for _ in range(K)],
            iso_stds=rng.uniform(0.0, 0.5, K),
            weights=rng.uniform(0.2, 1.0, K),
        )
        target = QuadraticTarget(rng.standard_normal(shape), scale=1e-4)
        init = img2img_init(np.zeros(shape), sigma_max, config["seed"], ci, 1)
        trajs = {}
        for kind in ("ddim", "ddim_pgd_form"):
            cfg = SamplerConfig(
                schedule=sched, weights=weights, sampler_kind=kind, record_trajectory=True
            )
            trajs[kind] = run_sampler(den, target, cfg, init)
        traj_dev = max(
            _rel_dev(sa[1], sb[1])
            for sa, sb in zip(trajs["ddim"].states, trajs["ddim_pgd_form"].states)
        )

        max_step_dev = max(max_step_dev, step_dev)
        max_traj_dev = max(max_traj_dev, traj_dev)
        for t in range(T, 0, -1):
            audit_rows.append(
                [
                    ci,
                    t,
                    float(sched.sigmas[t]),
                    alpha(sched, t),
                    gamma_t(weights, sched.sigmas[t]),
                    step_dev,
                    traj_dev,
                ]
            )

    write_csv(
        os.path.join(out, "equivalence.csv"),
        ["config", "t", "sigma_t", "alpha_t", "gamma_t", "max_step_rel_dev", "traj_rel_dev"],
        audit_rows,
    )
    ok = max_step_dev <= STEP_TOL and max_traj_dev <= TRAJ_TOL
    report = {
        "max_step_rel_dev": max_step_dev,
        "max_traj_rel_dev": max_traj_dev,
        "step_tol": STEP_TOL,
        "traj_tol": TRAJ_TOL,
        "ok": ok,
    }
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return report


def cmd_naive_descent(config):
    """Plain pixel-space gradient descent on the surrogate, for contrast
    with guided sampling: the objective falls while the image leaves the
    data manifold."""
    out = config["out"]
    echo_config(out, config)
    model = _guidable_model(config["model"])
    image = imageops.load_png(config["image"])
    traj = naive_pixel_descent(model, image, config["steps"], config["lr"])
    write_csv(
        os.path.join(out, "descent.csv"),
        ["step", "phi"],
        [[k, phi] for k, phi in traj.drag_track],
    )
    meta = {}
    every = config["save_every"]
    for k, frame in traj.states:
        if k % every == 0 or k == config["steps"]:
            name = f"step{k:05d}.png"
            _save_image(frame, os.path.join(out, name), meta, name)
    _write_image_meta(out, meta)
    phis = [phi for _, phi in traj.drag_track]
    return {"phi_initial": phis[0], "phi_final": phis[-1]}
