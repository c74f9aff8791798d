"""Command-line pipeline: warp, invert, pca-fit, morph, synthesize, paste,
noise-train, evaluate, selfcheck.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 selfcheck
failure. Every command validates its inputs before writing any file.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import blend as blend_mod
from . import fileio, geometry, metrics
from .config import InputError, PipelineConfig, apply_overrides, parse_config_file
from .embedders import EmbedderError, Embedders, load_embedder_weights
from .generator import ConfigError, Generator, load_weights
from .inversion import (NOISE_TRAIN_COLUMNS, TRACE_COLUMNS, InversionError,
                        NumericalError, invert, noise_train)
from .selfcheck import run_all

EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_SELFCHECK = 4

_INPUT_ERRORS = (InputError, fileio.FileFormatError, geometry.GeometryError,
                 ConfigError, InversionError, EmbedderError,
                 blend_mod.BlendError, metrics.MetricsError, OSError)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericalError as e:
            click.echo(f"numerical failure: {e}", err=True)
            sys.exit(EXIT_NUMERIC)
        except _INPUT_ERRORS as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_INPUT)
    return wrapper


@click.group()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Flat key=value config file.")
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Override one config key (repeatable).")
@click.pass_context
@_guarded
def main(ctx, config_path, overrides):
    """Landmark-enforced generative morphing pipeline."""
    values = parse_config_file(config_path) if config_path else {}
    values = apply_overrides(values, overrides)
    ctx.obj = PipelineConfig(values)


def _models(cfg: PipelineConfig) -> tuple[Generator, Embedders]:
    gen_dir = str(cfg["generator.weights_dir"])
    if gen_dir:
        gcfg, weights = load_weights(gen_dir)
        gen = Generator(gcfg, weights)
    else:
        gen = Generator(cfg.generator_config())
    emb_dir = str(cfg["embedders.weights_dir"])
    if emb_dir:
        ecfg, eweights = load_embedder_weights(emb_dir)
        emb = Embedders(ecfg, eweights)
    else:
        emb = Embedders(cfg.embedder_config())
    if emb.config.resolution != gen.config.resolution:
        raise InputError("embedder and generator resolutions differ")
    return gen, emb


def _load_square_image(path, resolution=None):
    img = fileio.load_image(path)
    if resolution is not None and img.shape != (resolution, resolution, 3):
        raise InputError(
            f"{path}: expected {resolution}x{resolution} RGB, got "
            f"{img.shape[1]}x{img.shape[0]}")
    return img


def _write_trace(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] if c == "step" else repr(float(row[c]))
                        for c in columns])


def _save_noise(dirpath, maps):
    fileio.save_tensor_dir(
        dirpath, {f"noise{i:02d}": m for i, m in enumerate(maps)},
        meta={"resolutions": [int(m.shape[0]) for m in maps]})


def _load_noise(dirpath):
    tensors, _ = fileio.load_tensor_dir(dirpath)
    return [tensors[k] for k in sorted(tensors)]


# ---------------------------------------------------------------------------


@main.command()
@click.option("--subject-a", required=True, type=click.Path())
@click.option("--subject-b", required=True, type=click.Path())
@click.option("--landmarks-a", required=True, type=click.Path())
@click.option("--landmarks-b", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--forehead-extension", type=float, default=0.0, show_default=True,
              help="Extra hull coverage above the landmarks, in pixels.")
@click.pass_obj
@_guarded
def warp(cfg, subject_a, subject_b, landmarks_a, landmarks_b, out_dir,
         forehead_extension):
    """Warp both subjects to their average landmarks and cut out the hulls."""
    img_a = _load_square_image(subject_a)
    img_b = _load_square_image(subject_b)
    if img_a.shape != img_b.shape:
        raise InputError("subject images must share dimensions")
    lm_a = fileio.load_landmarks(landmarks_a)
    lm_b = fileio.load_landmarks(landmarks_b)
    if lm_a.shape != lm_b.shape:
        raise InputError("landmark sets must have equal length")
    h, w = img_a.shape[:2]
    l_t = geometry.average_landmarks(lm_a, lm_b)
    boundary = geometry.boundary_points(h, w)
    mask = geometry.convex_hull_mask(l_t, None, (h, w),
                                     forehead_extension_px=forehead_extension)
    warped_a = geometry.warp_piecewise_affine(img_a, np.vstack([lm_a, boundary]),
                                              np.vstack([l_t, boundary]))
    warped_b = geometry.warp_piecewise_affine(img_b, np.vstack([lm_b, boundary]),
                                              np.vstack([l_t, boundary]))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_image(out / "warped_a.png", warped_a)
    fileio.save_image(out / "warped_b.png", warped_b)
    fileio.save_image(out / "hull_a.png", warped_a * mask[:, :, None])
    fileio.save_image(out / "hull_b.png", warped_b * mask[:, :, None])
    fileio.save_image(out / "mask.png", np.repeat(mask[:, :, None], 3, axis=2))
    fileio.save_landmarks(out / "target_landmarks.csv", l_t)
    click.echo(f"warped pair written to {out}")


@main.command("invert")
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--landmarks", "landmarks_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
@_guarded
def invert_cmd(cfg, image_path, landmarks_path, out_dir):
    """Optimize a latent code + noise to reconstruct an image."""
    gen, emb = _models(cfg)
    target = _load_square_image(image_path, gen.config.resolution)
    l_t = fileio.load_landmarks(landmarks_path)
    if len(l_t) != emb.config.landmark_count:
        raise InputError(f"need {emb.config.landmark_count} landmarks, "
                         f"got {len(l_t)}")
    out = Path(out_dir)
    inv_cfg = cfg.inversion_config()
    try:
        result = invert(target, l_t, gen, emb, inv_cfg)
    except NumericalError as e:
        out.mkdir(parents=True, exist_ok=True)
        _write_trace(out / "trace.csv", e.trace, TRACE_COLUMNS)
        click.echo(f"numerical failure (trace preserved): {e}", err=True)
        sys.exit(EXIT_NUMERIC)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_tensor(out / "w.mftn", result.W)
    _save_noise(out / "noise", result.noise)
    _write_trace(out / "trace.csv", result.trace, TRACE_COLUMNS)
    click.echo(f"inverted {image_path} -> {out} "
               f"(final loss {result.trace[-1]['loss_total']:.5f})")


@main.command("pca-fit")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--corpus-dir", type=click.Path(), default=None,
              help="Directory of latent .mftn files; default is a seeded sample.")
@click.pass_obj
@_guarded
def pca_fit(cfg, out_dir, corpus_dir):
    """Fit one PCA model per style index over a style corpus."""
    gen, _ = _models(cfg)
    if corpus_dir:
        files = sorted(Path(corpus_dir).glob("*.mftn"))
        if len(files) < 2:
            raise InputError(f"{corpus_dir}: need at least 2 latent files")
        corpus = []
        for f in files:
            W = fileio.load_tensor(f)
            if W.ndim == 1:
                W = gen.broadcast_w(W)
            corpus.append(gen.affine_styles(W))
    else:
        count = int(cfg["pca.sample_count"])
        rng = np.random.default_rng(int(cfg["pca.seed"]))
        w = gen.map_latent(rng.standard_normal((count, gen.config.latent_dim)))
        styles = gen.affine_styles_batch(w)
        corpus = [[styles[i][n] for i in range(len(styles))]
                  for n in range(count)]
    models = blend_mod.fit_style_pca(corpus)
    blend_mod.save_pca_models(out_dir, models)
    click.echo(f"fitted {len(models)} style PCA models from "
               f"{len(corpus)} samples -> {out_dir}")


@main.command()
@click.option("--w-a", required=True, type=click.Path())
@click.option("--w-b", required=True, type=click.Path())
@click.option("--mode", type=click.Choice(blend_mod.BLEND_MODES), default=None,
              help="Blend strategy; default is the config blend.mode.")
@click.option("--p", "p_frac", type=float, default=None,
              help="Averaged fraction of eigenvectors for PCA modes.")
@click.option("--models", "models_dir", type=click.Path(), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
@_guarded
def morph(cfg, w_a, w_b, mode, p_frac, models_dir, out_path):
    """Blend two inverted latents into a morph latent or style set."""
    gen, _ = _models(cfg)
    mode = mode or str(cfg["blend.mode"])
    p_frac = float(cfg["blend.p"]) if p_frac is None else p_frac
    Wa = fileio.load_tensor(w_a)
    Wb = fileio.load_tensor(w_b)
    if mode == "avg":
        Wm = blend_mod.average_latents(Wa, Wb)
        out = Path(out_path)
        out.parent.mkdir(parents=True, exist_ok=True)
        fileio.save_tensor(out, Wm)
        click.echo(f"averaged latent -> {out}")
        return
    if not models_dir:
        raise InputError(f"mode {mode} requires --models")
    models = blend_mod.load_pca_models(models_dir)
    sa = gen.affine_styles(Wa)
    sb = gen.affine_styles(Wb)
    sm = blend_mod.morph_styles(sa, sb, mode, p=p_frac, models=models)
    fileio.save_tensor_dir(
        out_path, {f"style{i:03d}": s for i, s in enumerate(sm)},
        meta={"kind": "styles", "mode": mode, "p": p_frac,
              "dims": [int(s.shape[0]) for s in sm]})
    click.echo(f"{mode} morph styles -> {out_path}")


def _parse_noise_spec(spec: str, gen: Generator):
    if spec == "zero":
        return gen.zero_noise()
    if spec.startswith("fresh:"):
        try:
            seed = int(spec.split(":", 1)[1])
        except ValueError:
            raise InputError(f"bad noise seed in {spec!r}") from None
        return gen.random_noise(seed)
    if spec.startswith("dir:"):
        maps = _load_noise(spec.split(":", 1)[1])
        expect = [m.shape for m in gen.zero_noise()]
        if [m.shape for m in maps] != expect:
            raise InputError("noise directory does not match generator layout")
        return maps
    raise InputError(f"unknown noise spec {spec!r}; use zero, fresh:SEED or dir:PATH")


@main.command()
@click.option("--w", "w_path", type=click.Path(), default=None)
@click.option("--styles", "styles_dir", type=click.Path(), default=None)
@click.option("--noise", "noise_spec", default="zero", show_default=True,
              help="zero, fresh:SEED (new N(0,1) maps) or dir:PATH.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_obj
@_guarded
def synthesize(cfg, w_path, styles_dir, noise_spec, out_path):
    """Render an image from a latent code or explicit style vectors."""
    gen, _ = _models(cfg)
    if (w_path is None) == (styles_dir is None):
        raise InputError("pass exactly one of --w or --styles")
    noise = _parse_noise_spec(noise_spec, gen)
    if w_path:
        W = fileio.load_tensor(w_path)
        if W.ndim == 1:
            W = gen.broadcast_w(W)
        img = gen.synthesize_from_w(W, noise)
    else:
        tensors, meta = fileio.load_tensor_dir(styles_dir)
        if meta.get("kind") != "styles":
            raise InputError(f"{styles_dir}: not a style-set directory")
        styles = [tensors[k] for k in sorted(tensors)]
        img = gen.synthesize(styles, noise)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fileio.save_image(out, img)
    click.echo(f"synthesized -> {out}")


@main.command()
@click.option("--morph", "morph_path", required=True, type=click.Path())
@click.option("--mask", "mask_path", required=True, type=click.Path())
@click.option("--background", "backgrounds", multiple=True, required=True,
              type=click.Path(), help="One or two bona fide backgrounds.")
@click.option("--feather", type=float, default=None,
              help="Gaussian sigma for mask feathering; default from config.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
@_guarded
def paste(cfg, morph_path, mask_path, backgrounds, feather, out_dir):
    """Paste a morph hull onto bona fide backgrounds (one output each)."""
    feather = float(cfg["paste.feather_px"]) if feather is None else feather
    morph_img = _load_square_image(morph_path)
    mask = fileio.load_image(mask_path)[:, :, 0]
    bgs = [(Path(p).stem, _load_square_image(p)) for p in backgrounds]
    for name, bg in bgs:
        if bg.shape != morph_img.shape:
            raise InputError(f"background {name} does not match morph size")
    if mask.shape != morph_img.shape[:2]:
        raise InputError("mask does not match morph size")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, bg in bgs:
        result = geometry.paste_composite(bg, morph_img, mask, feather)
        path = out / f"morph_on_{name}.png"
        fileio.save_image(path, result)
        written.append(path.name)
    click.echo(f"pasted -> {', '.join(written)}")


@main.command("noise-train")
@click.option("--w", "w_path", required=True, type=click.Path())
@click.option("--subject-a", required=True, type=click.Path())
@click.option("--subject-b", required=True, type=click.Path())
@click.option("--steps", type=int, default=None)
@click.option("--psnr-loss", "psnr_mode", type=click.Choice(["paper", "symmetric"]),
              default=None, help="Sign convention; default from config.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
@_guarded
def noise_train_cmd(cfg, w_path, subject_a, subject_b, steps, psnr_mode, out_dir):
    """Train complementary noise for a frozen morph latent."""
    gen, emb = _models(cfg)
    W = fileio.load_tensor(w_path)
    if W.ndim == 1:
        W = gen.broadcast_w(W)
    t1 = _load_square_image(subject_a, gen.config.resolution)
    t2 = _load_square_image(subject_b, gen.config.resolution)
    steps = int(cfg["noise_train.steps"]) if steps is None else steps
    mode = str(cfg["noise_train.psnr_loss"]) if psnr_mode is None else psnr_mode
    result = noise_train(W, t1, t2, gen, emb, steps=steps,
                         lr=float(cfg["noise_train.lr"]), mode=mode,
                         seed=int(cfg["noise_train.seed"]))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _save_noise(out / "noise", result.noise)
    _write_trace(out / "trace.csv", result.trace, NOISE_TRAIN_COLUMNS)
    click.echo(f"noise trained over {steps} steps ({mode} loss) -> {out}")


def _impostor_scores(gen: Generator, emb: Embedders, subjects: int, seed: int):
    rng = np.random.default_rng(seed)
    embeddings = []
    for i in range(subjects):
        w = gen.map_latent(rng.standard_normal(gen.config.latent_dim))
        img = gen.synthesize_from_w(gen.broadcast_w(w),
                                    gen.random_noise(seed + 1000 + i))
        embeddings.append(emb.identity_embed(img))
    scores = []
    for i in range(subjects):
        for j in range(i + 1, subjects):
            scores.append(emb.identity_similarity(embeddings[i], embeddings[j]))
    return np.asarray(scores)


@main.command()
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--detector-scores", "detector_path", type=click.Path(), default=None,
              help="label,score CSV from a single-morph detector.")
@click.option("--far", type=float, default=None,
              help="Verification false-accept rate; default from config.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
@_guarded
def evaluate(cfg, manifest_path, detector_path, far, jobs, out_dir):
    """Score morphs against their contributing subjects (MMPMR at a
    FAR-calibrated threshold) and optional detector outputs."""
    gen, emb = _models(cfg)
    far = float(cfg["evaluate.far"]) if far is None else far
    entries = fileio.load_pair_manifest(manifest_path)
    missing = [e["id"] for e in entries if "morph" not in e]
    if missing:
        raise InputError(f"manifest entries without a morph image: {missing}")
    detector = fileio.load_scores(detector_path) if detector_path else None

    def score(entry):
        e_m = emb.identity_embed(_load_square_image(entry["morph"]))
        e_a = emb.identity_embed(_load_square_image(entry["probe_a"]))
        e_b = emb.identity_embed(_load_square_image(entry["probe_b"]))
        return metrics.MorphTrial(entry["id"],
                                  emb.identity_similarity(e_m, e_a),
                                  emb.identity_similarity(e_m, e_b))

    trials = [score(entries[0])]  # warm the embedder graph cache single-threaded
    if jobs > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            trials += list(pool.map(score, entries[1:]))
    else:
        trials += [score(e) for e in entries[1:]]

    impostors = _impostor_scores(gen, emb, int(cfg["evaluate.impostor_subjects"]),
                                 int(cfg["evaluate.impostor_seed"]))
    tau = metrics.far_threshold(impostors, far)
    rate = metrics.mmpmr(trials, tau)

    report = {"pairs": len(trials), "far": far, "threshold": tau,
              "mmpmr": rate,
              "impostor_scores": len(impostors)}
    if detector is not None:
        bona, morph_scores = detector
        det = metrics.det_metrics(morph_scores, bona)
        report["detector"] = {
            "eer": det.eer,
            "apcer_at_bpcer": {str(k): v for k, v in det.apcer_at_bpcer.items()},
        }

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_trial_scores(out / "trials.csv",
                             [(t.morph_id, t.score_a, t.score_b) for t in trials])
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        w.writerow(["mmpmr", repr(rate)])
        w.writerow(["threshold", repr(tau)])
        w.writerow(["far", repr(far)])
        if detector is not None:
            w.writerow(["eer", repr(report["detector"]["eer"])])
            for k, v in report["detector"]["apcer_at_bpcer"].items():
                w.writerow([f"apcer_at_bpcer_{k}", repr(v)])
    click.echo(f"MMPMR {rate:.4f} at threshold {tau:.4f} (FAR {far}) -> {out}")


@main.command()
@click.option("--inject-fault", is_flag=True, hidden=True,
              help="Force one gradient check to fail (test hook).")
@_guarded
def selfcheck(inject_fault):
    """Run the built-in gradient/geometry/PCA/metric verification suites."""
    results = run_all(inject_fault=inject_fault)
    suites = {}
    for r in results:
        suites.setdefault(r.suite, []).append(r)
    failed = 0
    for suite, rows in suites.items():
        for r in rows:
            status = "PASS" if r.passed else "FAIL"
            detail = f"  ({r.detail})" if r.detail else ""
            click.echo(f"{status} [{suite}] {r.name}{detail}")
            failed += 0 if r.passed else 1
    click.echo(f"{len(results) - failed}/{len(results)} checks passed")
    if failed:
        sys.exit(EXIT_SELFCHECK)


if __name__ == "__main__":
    main()
