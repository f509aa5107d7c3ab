"""``qiup`` command-line front end.

    qiup predict|simulate|reconstruct|characterize|stitch|mode-sweep --config <path>
         [--out <dir>] [--seed <u64>] [--threads <n>]

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence,
4 I/O or file-format error, 5 stitched mosaic has gaps.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    ConvergenceError,
    FormatError,
    NoFWHMError,
    ReconstructionError,
    SetupError,
    UndersampledPSFError,
)
from .interferometer import (
    AcquisitionPlan,
    acquire_stack,
    load_stack,
    peak_rate_per_pixel,
    photon_rate_from_power,
    save_stack,
    uniform_phase_steps,
)
from .metrology import (
    compare_to_theory,
    extract_profile,
    fit_edge_response,
    fit_gaussian,
)
from .optics import (
    FLAGSHIP,
    SpdcSetup,
    fov_fwhm,
    imaging_metrics,
    mode_sweep,
    signal_wavelength,
    write_sweep_csv,
)
from .raster import export_pgm
from .reconstruct import load_maps, reconstruct_stack, save_maps, transmission_from_reference
from .sample import (
    empty_sample,
    load_sample,
    phantom_bars,
    phantom_knife_edge,
    phantom_phase_disk,
    phantom_texture,
    save_sample,
    uniform_sample,
)
from .stitch import Tile, read_tile_list, refine_offsets, save_mosaic, stitch

log = logging.getLogger("qiup")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
EXIT_GAPS = 5

METRICS_CSV_HEADER = ("quantity", "value", "unit")


# --- config to domain objects ------------------------------------------------------------


def build_setup(cfg: RunConfig) -> SpdcSetup:
    given = cfg.section("setup")
    preset = given.pop("preset", None)
    if preset == "flagship":
        values = FLAGSHIP.as_dict()
        if ("lambda_p" in given or "lambda_i" in given) and "lambda_s" not in given:
            values.pop("lambda_s")
    else:
        values = {"magnification": 1.0}
    values.update(given)
    required = ("lambda_p", "lambda_i", "n_s", "n_i", "crystal_length", "pump_waist")
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigError(f"[setup] missing {', '.join(missing)}")
    if "lambda_s" not in values:
        values["lambda_s"] = signal_wavelength(values["lambda_p"], values["lambda_i"])
    return SpdcSetup(**values)


def build_sample(cfg: RunConfig):
    g = lambda key: cfg.get("sample", key)  # noqa: E731
    kind = g("kind")
    width, height, pitch = g("width"), g("height"), g("pixel_pitch")

    def need(key):
        if not cfg.given("sample", key):
            raise ConfigError(f"[sample] kind {kind} requires {key}")
        return g(key)

    if kind == "empty":
        sample = empty_sample(width, height, pitch)
    elif kind == "uniform":
        sample = uniform_sample(width, height, pitch, g("transmission"))
    elif kind == "knife_edge":
        edge = g("edge_position") if cfg.given("sample", "edge_position") else (
            (width if g("orientation") == "x" else height) * pitch / 2)
        sample = phantom_knife_edge(width, height, pitch, edge, g("orientation"))
    elif kind == "bars":
        sample = phantom_bars(width, height, pitch, need("bar_period"), g("duty"), g("orientation"))
    elif kind == "phase_disk":
        sample = phantom_phase_disk(width, height, pitch, need("radius"), g("phase_shift"))
    elif kind == "texture":
        sample = phantom_texture(width, height, pitch, need("feature_size"), seed=g("texture_seed"),
                                 amplitude_range=(g("amplitude_min"), 1.0))
    else:
        sample = load_sample(need("path"))
    crop = [cfg.get("sample", k) for k in ("crop_x", "crop_y", "crop_width", "crop_height")]
    if any(v is not None for v in crop):
        if any(v is None for v in crop):
            raise ConfigError("[sample] crop needs crop_x, crop_y, crop_width and crop_height")
        sample = sample.crop(*crop)
    return sample


def build_plan(cfg: RunConfig, setup: SpdcSetup, pixel_pitch: float, seed: int | None = None) -> AcquisitionPlan:
    g = lambda key: cfg.get("plan", key)  # noqa: E731
    if cfg.given("plan", "phase_steps") and cfg.given("plan", "phase_step_count"):
        raise ConfigError("[plan] give either phase_steps or phase_step_count, not both")
    steps = tuple(g("phase_steps")) if cfg.given("plan", "phase_steps") else uniform_phase_steps(g("phase_step_count"))
    if cfg.given("plan", "photon_rate_peak") and cfg.given("plan", "idler_power"):
        raise ConfigError("[plan] give either photon_rate_peak or idler_power, not both")
    if cfg.given("plan", "idler_power"):
        total = photon_rate_from_power(g("idler_power"), setup.lambda_i) * g("detected_fraction")
        rate = peak_rate_per_pixel(total, fov_fwhm(setup), pixel_pitch)
    else:
        rate = g("photon_rate_peak") if cfg.given("plan", "photon_rate_peak") else 3000.0
    return AcquisitionPlan(
        phase_steps=steps,
        frames_per_step=g("frames_per_step"),
        exposure=g("exposure"),
        photon_rate_peak=rate,
        system_visibility=g("system_visibility"),
        coherence_fwhm_phase=cfg.get("plan", "coherence_fwhm_phase"),
        read_noise_rms=cfg.get("plan", "read_noise_rms"),
        seed=g("seed") if seed is None else seed,
        double_pass=g("double_pass"),
        shot_noise=g("shot_noise"),
    )


def write_provenance(out: Path, command: str, cfg: RunConfig, **extra) -> None:
    lines = [f"tool = qiup {__version__}", f"command = {command}"]
    lines += [f"{k} = {v}" for k, v in sorted(extra.items())]
    lines += ["", "# resolved configuration (SI units)", cfg.resolved_text()]
    (out / "provenance").write_text("\n".join(lines))


def _path_option(cli_value, cfg: RunConfig, section: str, key: str):
    if cli_value is not None:
        return Path(cli_value)
    return cfg.get(section, key)


# --- commands --------------------------------------------------------------------------


def cmd_predict(cfg: RunConfig, out: Path, opts) -> int:
    setup = build_setup(cfg)
    m = imaging_metrics(setup)
    rows = [
        ("fov_fwhm", m.fov_fwhm, "m"),
        ("resolution_fwhm", m.resolution_fwhm, "m"),
        ("modes_per_axis", m.modes_per_axis, ""),
        ("emission_half_angle", m.emission_half_angle, "rad"),
        ("na_limit", m.na_limit, ""),
    ]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_CSV_HEADER)
    for name, value, unit in rows:
        writer.writerow((name, repr(float(value)), unit))
    writer.writerow(("limited_by", m.limited_by, ""))
    (out / "metrics.csv").write_text(buf.getvalue())
    write_provenance(out, "predict", cfg)
    print(f"FoV (FWHM)          {m.fov_fwhm * 1e6:8.2f} um")
    print(f"resolution (FWHM)   {m.resolution_fwhm * 1e6:8.2f} um   [{m.limited_by}-limited, NA {m.na_limit:.4f}]")
    print(f"modes per axis      {m.modes_per_axis:8.2f}")
    print(f"emission half-angle {m.emission_half_angle:8.4f} rad")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, out: Path, opts) -> int:
    setup = build_setup(cfg)
    sample = build_sample(cfg)
    plan = build_plan(cfg, setup, sample.pixel_pitch, opts.seed)
    stack = acquire_stack(sample, setup, plan, threads=opts.threads)
    save_stack(stack, out)
    save_sample(sample, out / "sample.qsample")
    write_provenance(out, "simulate", cfg, seed=plan.seed, threads=opts.threads)
    print(f"wrote {stack.frames.shape[0]} frames of {sample.width}x{sample.height} px to {out}")
    return EXIT_OK


def _reconstruct(cfg: RunConfig, stack_path: Path, reference_path: Path | None):
    kwargs = dict(
        averaging=cfg.get("reconstruct", "averaging"),
        mean_floor=cfg.get("reconstruct", "mean_floor"),
        method=cfg.get("reconstruct", "method"),
        phase_offset=cfg.get("reconstruct", "phase_offset"),
    )
    maps = reconstruct_stack(load_stack(stack_path), **kwargs)
    if reference_path is not None:
        reference = reconstruct_stack(load_stack(reference_path), **kwargs)
        t = transmission_from_reference(maps, reference, cfg.get("reconstruct", "visibility_floor"))
        maps = maps.with_transmission(t)
    return maps


def cmd_reconstruct(cfg: RunConfig, out: Path, opts) -> int:
    stack_path = _path_option(opts.stack, cfg, "reconstruct", "stack")
    if stack_path is None:
        raise ConfigError("reconstruct needs a stack (--stack or [reconstruct] stack)")
    reference_path = _path_option(opts.reference, cfg, "reconstruct", "reference")
    maps = _reconstruct(cfg, Path(stack_path), reference_path)
    save_maps(maps, out, extra={"stack": Path(stack_path).name,
                                "reference": Path(reference_path).name if reference_path else "none"})
    if cfg.get("reconstruct", "export_pgm"):
        for name in ("mean", "visibility", "phase") + (("transmission",) if maps.transmission_map is not None else ()):
            export_pgm(out / f"{name}.pgm", maps.select(name))
    write_provenance(out, "reconstruct", cfg)
    print(f"valid pixels {int(maps.valid.sum())}/{maps.valid.size}, visibility clamp events {maps.clamp_count}")
    return EXIT_OK


def _positive_sigma(value: float, sigma: float) -> float:
    # noiseless fits have vanishing covariance; keep the comparison well defined
    return max(float(sigma), 1e-9 * abs(value), 1e-300)


def cmd_characterize(cfg: RunConfig, out: Path, opts) -> int:
    fit_kind = cfg.get("characterize", "fit")
    maps = None
    if fit_kind != "none":
        maps_path = _path_option(opts.maps, cfg, "characterize", "maps")
        stack_path = _path_option(opts.stack, cfg, "characterize", "stack")
        if maps_path is not None:
            maps = load_maps(maps_path)
        elif stack_path is not None:
            maps = _reconstruct(cfg, Path(stack_path), _path_option(opts.reference, cfg, "characterize", "reference"))
        else:
            raise ConfigError("characterize needs maps or a stack ([characterize] maps/stack)")

    setup = build_setup(cfg) if cfg.has("setup") else (maps.setup if maps is not None else None)
    if setup is None:
        raise ConfigError("characterize needs a [setup] section or maps that record their setup")

    band = cfg.get("characterize", "band")
    lines = []
    fitted = {}
    if fit_kind in ("both", "edge"):
        # visibility by default: the transmission map is clamped at 1, which
        # truncates noise on the bright plateau and narrows the fitted edge
        choice = cfg.get("characterize", "edge_map")
        axis = cfg.get("characterize", "edge_axis")
        contrast = np.ma.filled(maps.select(choice), 0.0)
        if cfg.get("characterize", "edge_average") == "complex":
            # average phasors across the band: the magnitude of a noisy
            # estimate is biased upward where the true contrast is near zero
            x, re = extract_profile(contrast * np.cos(maps.phase_map), maps.pixel_pitch, axis, band, mask=maps.valid)
            _, im = extract_profile(contrast * np.sin(maps.phase_map), maps.pixel_pitch, axis, band, mask=maps.valid)
            y = np.hypot(re, im)
        else:
            x, y = extract_profile(contrast, maps.pixel_pitch, axis, band, mask=maps.valid)
        edge = fit_edge_response(x, y)
        fitted["resolution_fwhm"] = (edge.psf_fwhm, _positive_sigma(edge.psf_fwhm, edge.psf_fwhm_sigma))
        lines += [f"edge fit on {choice} map: x0 = {float(edge.edge_position)!r} m, sigma = {float(edge.sigma)!r} m, "
                  f"psf_fwhm = {float(edge.psf_fwhm)!r} m, rmse = {float(edge.fit_rmse)!r}, "
                  f"iterations = {edge.iterations}"]
    if fit_kind in ("both", "fov"):
        x, y = extract_profile(maps.mean_map, maps.pixel_pitch, cfg.get("characterize", "fov_axis"), band)
        gauss = fit_gaussian(x, y)
        fitted["fov_fwhm"] = (gauss.fwhm, _positive_sigma(gauss.fwhm, gauss.fwhm_sigma))
        lines += [f"gaussian fit on mean map: center = {float(gauss.center)!r} m, fwhm = {float(gauss.fwhm)!r} m, "
                  f"peak = {float(gauss.peak)!r}, offset = {float(gauss.offset)!r}, rmse = {float(gauss.fit_rmse)!r}, "
                  f"iterations = {gauss.iterations}, peak_at_boundary = {gauss.peak_at_boundary}"]
    if "fov_fwhm" in fitted and "resolution_fwhm" in fitted:
        (f, sf), (r, sr) = fitted["fov_fwhm"], fitted["resolution_fwhm"]
        fitted["modes_per_axis"] = (f / r, (f / r) * math.hypot(sf / f, sr / r))

    measured = dict(fitted)
    if cfg.has("measured"):
        for q in ("fov_fwhm", "resolution_fwhm", "modes_per_axis"):
            if cfg.given("measured", q):
                sigma = cfg.get("measured", f"{q}_sigma")
                if sigma is None:
                    raise ConfigError(f"[measured] {q} needs {q}_sigma")
                measured[q] = (cfg.get("measured", q), sigma)
    if not measured:
        raise ConfigError("nothing to compare: enable a fit or list values under [measured]")

    theory_sigma = cfg.section("theory_sigma") or None
    setup_sigma = cfg.section("uncertainty") or None
    report = compare_to_theory(setup, measured, theory_sigma=theory_sigma, setup_sigma=setup_sigma,
                               theory_values=cfg.section("theory") or None)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.to_text())
    (out / "fits.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    write_provenance(out, "characterize", cfg)
    sys.stdout.write("\n".join(lines) + ("\n" if lines else "") + report.to_text())
    return EXIT_OK


def cmd_stitch(cfg: RunConfig, out: Path, opts) -> int:
    tiles_path = _path_option(opts.tiles, cfg, "stitch", "tiles")
    if tiles_path is None:
        raise ConfigError("stitch needs a tile list ([stitch] tiles or --tiles)")
    entries = read_tile_list(tiles_path)
    tiles = [Tile(load_maps(d), offset) for d, offset in entries]
    selection = cfg.get("stitch", "selection")
    notes = {}
    if cfg.get("stitch", "refine"):
        reg = refine_offsets(tiles, search=cfg.get("stitch", "search"), min_peak=cfg.get("stitch", "min_peak"),
                             selection=selection)
        tiles = [Tile(t.maps, off) for t, off in zip(tiles, reg.offsets)]
        notes["flagged_pairs"] = " ".join(f"{a}-{b}" for a, b in reg.flagged_pairs) or "none"
        notes["refined_offsets"] = " ".join(f"{x!r},{y!r}" for x, y in reg.offsets)
    mosaic = stitch(tiles, selection=selection, weight_floor=cfg.get("stitch", "weight_floor"))
    save_mosaic(mosaic, out, extra={"tiles": len(tiles), **notes})
    if cfg.get("stitch", "export_pgm"):
        export_pgm(out / "mosaic.pgm", np.where(mosaic.valid, mosaic.values, 0.0))
    write_provenance(out, "stitch", cfg)
    h, w = mosaic.values.shape
    print(f"mosaic {w}x{h} px, valid {int(mosaic.valid.sum())}, gaps {mosaic.gap_count}")
    if mosaic.gap_count:
        print(f"error: {mosaic.gap_count} mosaic pixels are not covered by any tile", file=sys.stderr)
        return EXIT_GAPS
    return EXIT_OK


def cmd_mode_sweep(cfg: RunConfig, out: Path, opts) -> int:
    g = lambda key: cfg.get("sweep", key)  # noqa: E731
    for key in ("lambda_i_min", "lambda_i_max", "apertures"):
        if not cfg.given("sweep", key):
            raise ConfigError(f"[sweep] requires {key}")
    n = g("n") if not cfg.given("sweep", "n_i") else (g("n"), g("n_i"))
    curves = mode_sweep(
        (g("lambda_i_min"), g("lambda_i_max")),
        g("samples"),
        g("apertures"),
        g("lambda_p"),
        n=n,
        pump_waist=g("pump_waist"),
        paraxial_threshold=g("paraxial_threshold"),
        squared=g("squared"),
        spacing=g("spacing"),
    )
    write_sweep_csv(curves, out / "modes.csv")
    write_provenance(out, "mode-sweep", cfg)
    for c in curves:
        ok = c.paraxial_ok
        print(f"{c.label:>18}: modes {c.modes[0]:.3g} -> {c.modes[-1]:.3g}, paraxial at {int(ok.sum())}/{ok.size} samples")
    return EXIT_OK


COMMANDS = {
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "characterize": cmd_characterize,
    "stitch": cmd_stitch,
    "mode-sweep": cmd_mode_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qiup", description=__doc__.split("\n\n")[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="INI run configuration")
    parser.add_argument("--out", help="output directory (default: [output] directory or ./qiup-<command>)")
    parser.add_argument("--seed", type=int, help="override the acquisition seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    parser.add_argument("--stack", help="stack directory (reconstruct, characterize)")
    parser.add_argument("--reference", help="empty-field reference stack directory")
    parser.add_argument("--maps", help="reconstruction directory (characterize)")
    parser.add_argument("--tiles", help="tile list CSV (stitch)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    opts = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if opts.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if opts.seed is not None and not 0 <= opts.seed < 2**64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        if opts.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(opts.config)
        out = Path(opts.out) if opts.out else (cfg.get("output", "directory") or Path(f"qiup-{opts.command}"))
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[opts.command](cfg, out, opts)
    except (ConvergenceError, NoFWHMError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, SetupError, UndersampledPSFError, ReconstructionError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
