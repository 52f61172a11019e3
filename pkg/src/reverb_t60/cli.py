"""Command-line entry point: ``reverb-t60 <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Logs go to stderr; results go to stdout or files.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (FeatureSet, RirPool, build_dataset, list_samples, plan_rirs, read_sample,
                      simulate_planned)
from .decay import estimate_t60
from .dsp import read_wav, write_wav
from .estimator import load_bundle, save_bundle, waveform_features
from .evaluation import (duration_sweep, five_number_summary, report, write_gnuplot,
                         write_report, write_sweep_csv)
from .autodiff import load_checkpoint
from .exceptions import (ConfigurationError, InsufficientDecayError, ReverbT60Error,
                         UnreachableTargetError)
from .models import estimate_t60_utterance, frame_estimates, init_ne_net, init_re_net
from .room import EssConfig, deconvolve_rir, ess_inverse_filter, generate_ess, save_rir
from .training import train_stage1, train_stage2

log = logging.getLogger("reverb_t60")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ENV_OUT_DIR = "REVERB_T60_OUT_DIR"
ENV_JOBS = "REVERB_T60_JOBS"
METHOD_NAME = "noise-aware"


class _Fail(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _emit(args, payload, text=None):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    elif text is not None:
        print(text)


def _load_config(args):
    cfg = RunConfig.from_toml(args.config) if args.config else RunConfig()
    if os.environ.get(ENV_OUT_DIR):
        cfg = cfg.override("run", out_dir=os.environ[ENV_OUT_DIR])
    if os.environ.get(ENV_JOBS):
        try:
            cfg = cfg.override("run", jobs=int(os.environ[ENV_JOBS]))
        except ValueError as exc:
            raise ConfigurationError(f"{ENV_JOBS} must be an integer") from exc
    cfg = cfg.override("run", jobs=getattr(args, "jobs", None))
    if getattr(args, "preset", None):
        cfg = cfg.override("model", preset=args.preset)
    if getattr(args, "seed", None) is not None:
        for section in ("rirs", "dataset", "train"):
            cfg = cfg.override(section, seed=args.seed)
    return cfg


def _out_dir(args, cfg, default_sub):
    if getattr(args, "out_dir", None):
        d = Path(args.out_dir)
    else:
        d = Path(cfg.run.out_dir) / default_sub
    d.mkdir(parents=True, exist_ok=True)
    return d


def _stamp(out_dir, cfg, command, extra=None):
    record = {"command": command, "config_hash": cfg.hash(), "config": cfg.to_dict()}
    record.update(extra or {})
    (Path(out_dir) / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True))


# --- gen-rirs ---------------------------------------------------------------------
def _simulate_job(job, rir_cfg):
    try:
        return job, simulate_planned(job, rir_cfg), None
    except (UnreachableTargetError, InsufficientDecayError) as exc:
        return job, None, str(exc)


def cmd_gen_rirs(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "rirs")
    jobs = plan_rirs(cfg.rirs)
    log.info("simulating %d RIRs with %d worker(s)", len(jobs), cfg.run.jobs)
    if cfg.run.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.run.jobs) as ex:
            results = list(ex.map(_simulate_job, jobs, [cfg.rirs] * len(jobs)))
    else:
        results = [_simulate_job(j, cfg.rirs) for j in jobs]
    rows, warnings = [], []
    for job, rir, err in results:
        key, dims, target = job[0], job[1], job[2]
        if rir is None:
            log.warning("%s: skipped (%s)", key, err)
            warnings.append({"id": key, "target_t60": target, "message": err})
            continue
        rir.provenance["config_hash"] = cfg.hash()
        save_rir(out / f"{key}.wav", rir)
        rows.append({"id": key, "length_m": dims[0], "width_m": dims[1], "height_m": dims[2],
                     "absorption": rir.provenance["absorption"], "target_t60": target,
                     "t60": rir.ground_truth_t60,
                     "rel_error": rir.ground_truth_t60 / target - 1.0,
                     "eyring_t60": rir.provenance["eyring_t60"]})
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "length_m", "width_m", "height_m", "absorption",
                                           "target_t60", "t60", "rel_error", "eyring_t60"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    _stamp(out, cfg, "gen-rirs", {"n_rirs": len(rows), "warnings": warnings})
    _emit(args, {"out_dir": str(out), "n_rirs": len(rows), "warnings": warnings,
                 "config_hash": cfg.hash()},
          f"wrote {len(rows)} RIRs to {out} ({len(warnings)} warning(s))")
    return EXIT_OK


# --- synth-data -------------------------------------------------------------------
def cmd_synth_data(args):
    cfg = _load_config(args)
    if args.split:
        cfg = cfg.override("dataset", split=args.split)
    if args.split == "test" and args.snrs is None:
        cfg = cfg.override("dataset", snrs=cfg.eval.snrs)
    if args.snrs is not None:
        cfg = cfg.override("dataset", snrs=tuple(args.snrs))
    out = _out_dir(args, cfg, f"data_{cfg.dataset.split}")
    pool = RirPool.from_directory(args.rir_dir)
    manifest = build_dataset(cfg.dataset, pool, out, jobs=cfg.run.jobs)
    path = out / "manifest.json"
    record = json.loads(path.read_text())
    record["config_hash"] = cfg.hash()
    path.write_text(json.dumps(record, indent=2, sort_keys=True))
    _stamp(out, cfg, "synth-data", {"content_hash": manifest.content_hash})
    _emit(args, {"out_dir": str(out), "n_samples": len(manifest),
                 "manifest_hash": manifest.manifest_hash(),
                 "content_hash": manifest.content_hash, "config_hash": cfg.hash()},
          f"wrote {len(manifest)} samples to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------------
def cmd_train(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "model")
    train = FeatureSet.from_directory(args.data_dir)
    if len(train) == 0:
        raise _Fail(EXIT_DATA, f"no samples in {args.data_dir}")
    val = FeatureSet.from_directory(args.val_dir) if args.val_dir else None
    mcfg, tcfg = cfg.model, cfg.train
    meta = {"config_hash": cfg.hash()}
    ne = init_ne_net(mcfg, seed=tcfg.seed)
    stage1_ckpt = Path(args.resume) if args.resume else None
    if args.stage == "2" and stage1_ckpt is None:
        candidate = out / "stage1_best.ckpt"
        if not candidate.exists():
            raise _Fail(EXIT_DATA, "stage 2 needs a stage-1 checkpoint (--resume)")
        stage1_ckpt = candidate
    summary = {"config_hash": cfg.hash(), "out_dir": str(out)}
    if stage1_ckpt is not None:
        loaded, _ = load_checkpoint(stage1_ckpt)
        if set(loaded) != set(ne):
            raise _Fail(EXIT_CONFIG, f"{stage1_ckpt} does not match the configured model")
        ne = loaded
        log.info("resuming from %s; stage 1 skipped", stage1_ckpt)
        summary["stage1"] = {"skipped": True, "resumed_from": str(stage1_ckpt)}
    elif args.stage in ("1", "both"):
        h1 = train_stage1(ne, train, tcfg, mcfg, val=val, out_dir=out, run_meta=meta)
        summary["stage1"] = {"epochs": len(h1), "final_loss": h1[-1].train_loss}
    if args.stage in ("2", "both"):
        re = init_re_net(mcfg, seed=tcfg.seed + 1)
        h2 = train_stage2(ne, re, train, tcfg, mcfg, val=val, out_dir=out, run_meta=meta)
        summary["stage2"] = {"epochs": len(h2), "final_loss": h2[-1].train_loss}
        save_bundle(out / "bundle", ne, re, mcfg, cfg.hash(), meta)
        summary["bundle"] = str(out / "bundle")
    _stamp(out, cfg, "train", summary)
    _emit(args, summary, f"training finished; artifacts in {out}")
    return EXIT_OK


# --- inference --------------------------------------------------------------------
def _read_audio(path):
    try:
        return read_wav(path)
    except (OSError, ValueError) as exc:
        raise _Fail(EXIT_DATA, f"cannot read {path}: {exc}") from exc


def cmd_estimate(args):
    ne, re, mcfg, _ = load_bundle(args.model)
    buf = _read_audio(args.wav)
    mag = waveform_features(buf.samples, buf.sample_rate)
    t60 = estimate_t60_utterance(mag, ne, re, mcfg)
    payload = {"wav": str(args.wav), "t60_s": t60, "frames": int(mag.shape[0])}
    text = f"{t60:.4f}"
    if args.per_frame:
        track = frame_estimates(mag, ne, re, mcfg)
        payload["per_frame"] = track.tolist()
        text = "\n".join(f"{v:.6f}" for v in track)
    _emit(args, payload, text)
    return EXIT_OK


def _eval_records(ne, re, mcfg, data_dir, condition="all"):
    records = []
    for i in list_samples(data_dir):
        sample = read_sample(data_dir, i)
        mag = waveform_features(sample.y.samples, sample.y.sample_rate)
        spec = sample.spec
        records.append({"index": i, "method": METHOD_NAME,
                        "condition": condition,
                        "snr": spec.snr_db if spec else float("nan"),
                        "t60": sample.t60_label,
                        "estimate": estimate_t60_utterance(mag, ne, re, mcfg)})
    if not records:
        raise _Fail(EXIT_DATA, f"no samples in {data_dir}")
    return records


def _write_estimates(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["index", "method", "condition", "snr", "t60",
                                           "estimate"])
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _read_estimates(path):
    with open(path, newline="") as fh:
        return [dict(r, snr=float(r["snr"]), t60=float(r["t60"]),
                     estimate=float(r["estimate"])) for r in csv.DictReader(fh)]


def _write_report_files(out, records, cfg):
    rows = report(records, clamp=cfg.eval.clamp)
    write_report(rows, out / "report.csv", out / "report.json")
    # box-plot data: error five-number summary per SNR
    by_snr = {}
    for r in records:
        by_snr.setdefault(r["snr"], []).append(r["t60"] - r["estimate"])
    snrs = sorted(by_snr)
    summ = [five_number_summary(by_snr[s]) for s in snrs]
    write_gnuplot(out / "errors_by_snr.dat",
                  [snrs] + [[s[k] for s in summ] for k in ("min", "q1", "median", "q3", "max")],
                  header=["snr_db", "min", "q1", "median", "q3", "max"])
    return rows


def cmd_eval(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "eval")
    ne, re, mcfg, record = load_bundle(args.model)
    records = _eval_records(ne, re, mcfg, args.data_dir, args.condition)
    _write_estimates(out / "estimates.csv", records)
    rows = _write_report_files(out, records, cfg)
    _stamp(out, cfg, "eval", {"model_config_hash": record.get("config_hash")})
    est = np.array([r["estimate"] for r in records])
    t60 = np.array([r["t60"] for r in records])
    overall = float(np.sqrt(np.mean((t60 - est) ** 2)))
    _emit(args, {"rows": rows, "rmse_s": overall, "n": len(records)},
          f"RMSE over {len(records)} samples: {overall * 1000:.1f} ms")
    return EXIT_OK


def cmd_report(args):
    cfg = _load_config(args)
    out = _out_dir(args, cfg, "report")
    records = []
    for path in args.estimates:
        records.extend(_read_estimates(path))
    rows = _write_report_files(out, records, cfg)
    _stamp(out, cfg, "report", {"inputs": [str(p) for p in args.estimates]})
    lines = [f"{r['method']} [{r['condition']}]: avg RMSE {r['rmse_avg'] * 1000:.1f} ms"
             for r in rows]
    _emit(args, {"rows": rows}, "\n".join(lines))
    return EXIT_OK


def cmd_sweep_duration(args):
    cfg = _load_config(args)
    ne, re, mcfg, _ = load_bundle(args.model)
    buf = _read_audio(args.wav)

    def track(samples):
        return frame_estimates(waveform_features(samples, buf.sample_rate), ne, re, mcfg)

    sweep = duration_sweep(track, buf.samples, buf.sample_rate, cfg.eval.sweep_step,
                           cfg.eval.sweep_max, mode=args.mode)
    out = Path(args.out) if args.out else _out_dir(args, cfg, "sweep") / "sweep.csv"
    write_sweep_csv(out, sweep)
    _emit(args, {"out": str(out), "points": sweep.tolist()},
          f"wrote {sweep.shape[0]} points to {out}")
    return EXIT_OK


def cmd_measure(args):
    ess_cfg = EssConfig(f_start=args.f_start, f_end=args.f_end,
                        duration=args.duration, sample_rate=args.sample_rate)
    if args.write_sweep:
        excitation, _ = generate_ess(ess_cfg)
        write_wav(args.write_sweep, excitation, fmt="float32")
        _emit(args, {"sweep": str(args.write_sweep)}, f"wrote sweep to {args.write_sweep}")
        return EXIT_OK
    if not (args.sweep and args.recording):
        raise _Fail(EXIT_CONFIG, "measure needs SWEEP and RECORDING (or --write-sweep)")
    sweep = _read_audio(args.sweep)
    rec = _read_audio(args.recording)
    inv = ess_inverse_filter(sweep, args.f_start, args.f_end)
    rir = deconvolve_rir(rec, inv, length=args.length)
    t60, fit = estimate_t60(rir)
    rir.ground_truth_t60 = t60
    if args.out:
        save_rir(args.out, rir)
    _emit(args, {"t60_s": t60, "fit_method": fit.method, "r_squared": fit.r_squared,
                 "rir": str(args.out) if args.out else None}, f"{t60:.4f}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------
def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--json", action="store_true", help="machine-readable stdout")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ERROR")

    p = argparse.ArgumentParser(prog="reverb-t60",
                                description="Noise-aware blind reverberation time estimation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-rirs", parents=[common], help="simulate the training RIR pool")
    g.add_argument("--out-dir")
    g.add_argument("--jobs", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_rirs)

    s = sub.add_parser("synth-data", parents=[common], help="render noisy reverberant samples")
    s.add_argument("--rir-dir", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--split", choices=("train", "val", "test"))
    s.add_argument("--snrs", type=float, nargs="+")
    s.add_argument("--jobs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("--data-dir", required=True)
    t.add_argument("--val-dir")
    t.add_argument("--out-dir")
    t.add_argument("--stage", choices=("1", "2", "both"), default="both")
    t.add_argument("--resume", help="stage-1 NE-NET checkpoint; stage 1 is skipped")
    t.add_argument("--preset", choices=("desk", "paper", "tiny"))
    t.add_argument("--seed", type=int)
    t.add_argument("--jobs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", parents=[common], help="T60 of one WAV file")
    e.add_argument("--model", required=True, help="bundle directory written by train")
    e.add_argument("wav")
    e.add_argument("--per-frame", action="store_true")
    e.set_defaults(func=cmd_estimate)

    v = sub.add_parser("eval", parents=[common], help="score a model on a rendered test set")
    v.add_argument("--model", required=True)
    v.add_argument("--data-dir", required=True)
    v.add_argument("--out-dir")
    v.add_argument("--condition", default="all", help="label for this test set in reports")
    v.add_argument("--jobs", type=int)
    v.set_defaults(func=cmd_eval)

    w = sub.add_parser("sweep-duration", parents=[common],
                       help="estimates for growing prefixes of an utterance")
    w.add_argument("--model", required=True)
    w.add_argument("wav")
    w.add_argument("--out")
    w.add_argument("--out-dir")
    w.add_argument("--mode", choices=("prefix", "full"), default="prefix")
    w.set_defaults(func=cmd_sweep_duration)

    m = sub.add_parser("measure", parents=[common], help="RIR and T60 from a sweep recording")
    m.add_argument("sweep", nargs="?")
    m.add_argument("recording", nargs="?")
    m.add_argument("--out", help="write the recovered RIR here (WAV + JSON sidecar)")
    m.add_argument("--write-sweep", help="only write an excitation sweep to this path")
    m.add_argument("--f-start", type=float, default=20.0)
    m.add_argument("--f-end", type=float, default=20000.0)
    m.add_argument("--duration", type=float, default=20.0)
    m.add_argument("--sample-rate", type=int, default=48000)
    m.add_argument("--length", type=float, default=None, help="seconds of RIR to keep")
    m.set_defaults(func=cmd_measure)

    r = sub.add_parser("report", parents=[common], help="tables from estimates CSV files")
    r.add_argument("estimates", nargs="+")
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = args.log_level or os.environ.get("REVERB_T60_LOG_LEVEL", "INFO")
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        return args.func(args)
    except _Fail as exc:
        log.error("%s: %s", args.command, exc)
        return exc.code
    except ConfigurationError as exc:
        log.error("%s: configuration error: %s", args.command, exc)
        return EXIT_CONFIG
    except (ReverbT60Error, FloatingPointError) as exc:
        code = getattr(exc, "exit_code", EXIT_NUMERIC)
        kind = "numeric failure" if code == EXIT_NUMERIC else "data error"
        log.error("%s: %s: %s", args.command, kind, exc)
        return code
    except (ValueError, OSError) as exc:
        log.error("%s: data error: %s", args.command, exc)
        return EXIT_DATA

if __name__ == "__main__":
    sys.exit(main())
