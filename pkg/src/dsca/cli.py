"""Command-line entry point: cohort synthesis, training, evaluation,
gradient checking, ablation sweeps, and attention export.

Configuration comes from a plain-text ``key = value`` file (`#` comments)
plus repeatable ``--set key=value`` overrides; every key is validated
against the schema below and unknown keys are rejected. Each command
echoes its effective configuration into the output directory, and all
output files are written atomically.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .data import (AlignmentViolation, BadMagic, NonFiniteToken, PatientBag,
                   SynthConfig, TruncatedFile, generate_synthetic_cohort,
                   load_bag, load_cohort, save_cohort)
from .network import DscaConfig, DscaParams, ParamsShapeMismatch, forward
from .survival import (concordance_index, kaplan_meier, logrank_test,
                       stratify_by_median)
from .training import (TrainConfig, cross_validate, gradient_check_report,
                       predict_risks, run_ablation)


class ConfigError(ValueError):
    pass


def _parse_bool(raw):
    v = raw.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


# key -> (parser, default). "lambda" maps onto the lam fields.
SCHEMA = {
    # synthetic cohort
    "n_patients": (int, 100),
    "m": (int, 16),
    "lambda": (int, 2),
    "d": (int, 32),
    "signal_site": (str, "both"),
    "signal_fraction": (float, 0.5),
    "beta": (float, 3.0),
    "censor_rate": (float, 0.2),
    # model
    "d_e": (int, 384),
    "conv_k": (int, 5),
    "conv_s": (int, 1),
    "n_heads": (int, 6),
    "ffn_mult": (int, 4),
    "n_t": (int, 4),
    "fusion": (str, "concat"),
    "high_embed": (str, "mlp"),
    "pool": (str, "cross_attention"),
    "use_pe": (_parse_bool, True),
    "activation": (str, "relu"),
    "streams": (str, "dual"),
    # training
    "max_epochs": (int, 150),
    "lr": (float, 8e-5),
    "accum_steps": (int, 16),
    "weight_decay": (float, 5e-4),
    "lr_decay_factor": (float, 0.5),
    "lr_patience": (int, 10),
    "early_stop_patience": (int, 30),
    "alpha": (float, 0.0),
    # experiment
    "k_folds": (int, 5),
    "n_jobs": (int, 1),
    "seed": (int, 0),
    "manifest": (str, ""),
    "out_dir": (str, "out"),
    "variants": (str, "dual_cross"),
}

ABLATION_PRESETS = {
    "dual_cross": {},
    "dual_mean": {"pool": "mean"},
    "low": {"streams": "low"},
    "high": {"streams": "high", "pool": "mean"},
    "high_cross": {"streams": "high"},
    "add": {"fusion": "add"},
    "no_pe": {"use_pe": False},
    "conv2d": {"high_embed": "conv2d"},
}


def parse_config_file(path):
    raw = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            raw[key.strip()] = value.strip()
    return raw


class RunConfig:
    """Validated union of all configuration keys."""

    def __init__(self, values):
        self.values = values

    @classmethod
    def build(cls, config_path=None, overrides=(), seed=None, out_dir=None):
        values = {key: default for key, (_, default) in SCHEMA.items()}
        raw = parse_config_file(config_path) if config_path else {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            raw[key.strip()] = value.strip()
        for key, value in raw.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown configuration key {key!r}")
            parser, _ = SCHEMA[key]
            try:
                values[key] = parser(value)
            except ConfigError:
                raise
            except Exception:
                raise ConfigError(f"bad value for {key!r}: {value!r}")
        if seed is not None:
            values["seed"] = seed
        if out_dir is not None:
            values["out_dir"] = out_dir
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def synth_config(self):
        v = self.values
        return SynthConfig(
            n_patients=v["n_patients"], m=v["m"], lam=v["lambda"], d=v["d"],
            signal_site=v["signal_site"], signal_fraction=v["signal_fraction"],
            beta=v["beta"], censor_rate=v["censor_rate"], seed=v["seed"],
        ).validate()

    def model_config(self, d=None, lam=None):
        v = self.values
        return DscaConfig(
            d=v["d"] if d is None else d,
            d_e=v["d_e"],
            lam=v["lambda"] if lam is None else lam,
            conv_k=v["conv_k"], conv_s=v["conv_s"], n_heads=v["n_heads"],
            ffn_mult=v["ffn_mult"], n_t=v["n_t"], fusion=v["fusion"],
            high_embed=v["high_embed"], pool=v["pool"], use_pe=v["use_pe"],
            activation=v["activation"], streams=v["streams"],
        ).validate()

    def train_config(self):
        v = self.values
        return TrainConfig(
            max_epochs=v["max_epochs"], lr=v["lr"], accum_steps=v["accum_steps"],
            weight_decay=v["weight_decay"], lr_decay_factor=v["lr_decay_factor"],
            lr_patience=v["lr_patience"],
            early_stop_patience=v["early_stop_patience"],
            alpha=v["alpha"], seed=v["seed"],
        ).validate()

    def echo_text(self):
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _echo_config(cfg, out_dir):
    _write_text(os.path.join(out_dir, "config.echo.txt"), cfg.echo_text())


def _fmt(x):
    return repr(float(x))


def cmd_synth(cfg):
    scfg = cfg.synth_config()
    cohort = generate_synthetic_cohort(scfg)
    out_dir = cfg["out_dir"]
    manifest = save_cohort(cohort, out_dir)
    _echo_config(cfg, out_dir)
    events = sum(1 - b.censor for b in cohort.bags)
    print(f"cohort {cohort.name}: {len(cohort)} patients -> {manifest}")
    print(f"  events {events}, censored fraction "
          f"{1 - events / len(cohort):.3f} (target {scfg.censor_rate})")
    print(f"  m={scfg.m} lambda={scfg.lam} d={scfg.d} signal={scfg.signal_site}")
    return 0


def _model_config_for(cfg, cohort):
    bag = cohort.bags[0]
    return cfg.model_config(d=bag.d, lam=bag.lam)


def _metrics_csv(cv):
    lines = ["fold,c_index,n_patients,n_events"]
    for fr in cv.fold_results:
        lines.append(f"{fr.fold},{_fmt(fr.c_index)},{fr.n_patients},{fr.n_events}")
    total_p = sum(fr.n_patients for fr in cv.fold_results)
    total_e = sum(fr.n_events for fr in cv.fold_results)
    lines.append(f"mean,{_fmt(cv.mean_c_index)},{total_p},{total_e}")
    lines.append(f"std,{_fmt(cv.std_c_index)},{total_p},{total_e}")
    return "\n".join(lines) + "\n"


def cmd_train(cfg):
    cohort = load_cohort(cfg["manifest"])
    model_cfg = _model_config_for(cfg, cohort)
    train_cfg = cfg.train_config()
    out_dir = cfg["out_dir"]
    cv = cross_validate(cohort, model_cfg, train_cfg, k=cfg["k_folds"],
                        n_jobs=cfg["n_jobs"], keep_params=True)
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    _write_text(os.path.join(out_dir, "metrics.csv"), _metrics_csv(cv))
    risk_lines = ["patient_id,risk,time,event"]
    for pid, r, t, c in zip(cv.pooled_ids, cv.pooled_risks,
                            cv.pooled_times, cv.pooled_censors):
        risk_lines.append(f"{pid},{_fmt(r)},{_fmt(t)},{1 - int(c)}")
    _write_text(os.path.join(out_dir, "risks.csv"), "\n".join(risk_lines) + "\n")
    for fr, params in zip(cv.fold_results, cv.fold_params):
        lines = ["epoch,train_loss,val_loss,lr"]
        for log in fr.report.epoch_log:
            lines.append(f"{log.epoch},{_fmt(log.train_loss)},"
                         f"{_fmt(log.val_loss)},{_fmt(log.lr)}")
        _write_text(os.path.join(out_dir, f"fold{fr.fold}_epochs.csv"),
                    "\n".join(lines) + "\n")
        params.save(os.path.join(out_dir, f"fold{fr.fold}.params"))
    print(f"mean c-index {cv.mean_c_index:.5f} (std {cv.std_c_index:.5f}) "
          f"over {len(cv.fold_results)} folds -> {out_dir}")
    return 0


def _km_csv(curves):
    lines = ["group,time,survival,at_risk,events"]
    for group, km in curves.items():
        for t, s, n, d in zip(km.times, km.survival, km.at_risk, km.events):
            lines.append(f"{group},{_fmt(t)},{_fmt(s)},{int(n)},{int(d)}")
    return "\n".join(lines) + "\n"


def _km_svg(curves, width=640, height=440, margin=56):
    """Minimal step-curve plot: two polylines plus axes, no dependencies."""
    t_max = max((float(km.times.max()) for km in curves.values()
                 if km.times.size), default=1.0) or 1.0
    px = lambda t: margin + (width - 2 * margin) * t / t_max
    py = lambda s: margin + (height - 2 * margin) * (1.0 - s)
    colors = {"high": "#c0392b", "low": "#2471a3"}
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{py(0)}" x2="{px(t_max)}" y2="{py(0)}" stroke="black"/>',
        f'<line x1="{margin}" y1="{py(0)}" x2="{margin}" y2="{py(1)}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" font-size="12" '
        f'text-anchor="middle">time</text>',
        f'<text x="14" y="{height / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.1f})">survival</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{margin - 6}" y="{py(frac) + 4:.1f}" font-size="10" '
                     f'text-anchor="end">{frac:.1f}</text>')
    for i, (group, km) in enumerate(curves.items()):
        pts = [(0.0, 1.0)]
        s_prev = 1.0
        for t, s in zip(km.times, km.survival):
            pts.append((float(t), s_prev))
            pts.append((float(t), float(s)))
            s_prev = float(s)
        pts.append((t_max, s_prev))
        path = " ".join(f"{px(t):.2f},{py(s):.2f}" for t, s in pts)
        color = colors.get(group, "#555555")
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 16 * i + 10}" '
                     f'font-size="11" fill="{color}">{group}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_eval(cfg, params_path, manifest_path):
    cohort = load_cohort(manifest_path or cfg["manifest"])
    model_cfg = _model_config_for(cfg, cohort)
    params = DscaParams.load(params_path, model_cfg)
    out_dir = cfg["out_dir"]
    risks = predict_risks(cohort.bags, params, model_cfg)
    times = np.asarray([b.time for b in cohort.bags])
    events = np.asarray([1 - b.censor for b in cohort.bags])
    c = concordance_index(risks, times, 1 - events)
    high, low = stratify_by_median(risks)

    lines = [f"patients {len(cohort)}", f"events {int(events.sum())}",
             f"c_index {_fmt(c)}",
             f"high_risk {len(high)}", f"low_risk {len(low)}"]
    curves = {}
    if len(high) == 0 or len(low) == 0:
        lines.append("logrank not_applicable (one risk group is empty)")
        groups = {"low": np.arange(len(risks))} if len(high) == 0 else {"high": high}
        for name, idx in groups.items():
            curves[name] = kaplan_meier(times[idx], events[idx])
    else:
        chi2, p = logrank_test(times[high], events[high], times[low], events[low])
        lines.append(f"logrank_chi2 {_fmt(chi2)}")
        lines.append(f"logrank_p {_fmt(p)}")
        curves["high"] = kaplan_meier(times[high], events[high])
        curves["low"] = kaplan_meier(times[low], events[low])

    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    _write_text(os.path.join(out_dir, "km.csv"), _km_csv(curves))
    _write_text(os.path.join(out_dir, "km.svg"), _km_svg(curves))
    report = "\n".join(lines) + "\n"
    _write_text(os.path.join(out_dir, "eval_report.txt"), report)
    print(report, end="")
    return 0


def cmd_gradcheck(cfg):
    model = cfg.model_config()
    variant = replace(model, d=6, d_e=4, lam=2, n_heads=2, ffn_mult=2, n_t=3,
                      conv_s=1)
    errors = gradient_check_report(variant, m=3, seed=cfg["seed"])
    worst = max(errors.values())
    for name in sorted(errors):
        status = "PASS" if errors[name] < 1e-4 else "FAIL"
        print(f"{status} {name:24s} max_rel_err {errors[name]:.3e}")
    print(f"worst {worst:.3e} ({'PASS' if worst < 1e-4 else 'FAIL'})")
    return 0 if worst < 1e-4 else 2


def cmd_export_attn(cfg, params_path, bag_path):
    bag = load_bag(bag_path)
    model_cfg = cfg.model_config(d=bag.d, lam=bag.lam)
    params = DscaParams.load(params_path, model_cfg)
    out_dir = cfg["out_dir"]
    res = forward(bag, params, model_cfg, collect_attention=True)

    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    if res.cross_attention is not None:
        lines = ["patient_id,square_index,row,col,head,score"]
        m, n_heads, lam2 = res.cross_attention.shape
        lam = int(round(lam2 ** 0.5))
        for j in range(m):
            for h in range(n_heads):
                for cell in range(lam2):
                    lines.append(f"{bag.patient_id},{j},{cell // lam},{cell % lam},"
                                 f"{h},{_fmt(res.cross_attention[j, h, cell])}")
        _write_text(os.path.join(out_dir, "cross_attention.csv"),
                    "\n".join(lines) + "\n")
    gap = res.gap_attention
    uv = res.token_uv
    lines = ["patient_id,token_index,u,v,score"]
    for j in range(gap.shape[0]):
        lines.append(f"{bag.patient_id},{j},{uv[j, 0]},{uv[j, 1]},{_fmt(gap[j])}")
    _write_text(os.path.join(out_dir, "gap_attention.csv"), "\n".join(lines) + "\n")
    order = np.argsort(-gap, kind="stable")
    lines = ["patient_id,rank,token_index,u,v,score"]
    for rank, j in enumerate(order):
        lines.append(f"{bag.patient_id},{rank},{int(j)},{uv[j, 0]},{uv[j, 1]},"
                     f"{_fmt(gap[j])}")
    _write_text(os.path.join(out_dir, "top_regions.csv"), "\n".join(lines) + "\n")
    print(f"attention exports written to {out_dir}")
    return 0


def cmd_ablate(cfg):
    cohort = load_cohort(cfg["manifest"])
    base = _model_config_for(cfg, cohort)
    train_cfg = cfg.train_config()
    names = [v for v in cfg["variants"].replace(",", " ").split() if v]
    variants = []
    for name in names:
        if name not in ABLATION_PRESETS:
            raise ConfigError(f"unknown ablation variant {name!r}; "
                              f"choose from {sorted(ABLATION_PRESETS)}")
        variants.append((name, replace(base, **ABLATION_PRESETS[name]).validate()))
    rows = run_ablation(cohort, variants, train_cfg, k=cfg["k_folds"],
                        n_jobs=cfg["n_jobs"])
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    _echo_config(cfg, out_dir)
    k = cfg["k_folds"]
    header = "variant,streams,pool,fusion,use_pe,mean_c_index,std_c_index," + \
             ",".join(f"fold{i}" for i in range(k))
    lines = [header]
    for row in rows:
        folds = ",".join(_fmt(c) for c in row["fold_c_index"])
        lines.append(f"{row['variant']},{row['streams']},{row['pool']},"
                     f"{row['fusion']},{str(row['use_pe']).lower()},"
                     f"{_fmt(row['mean_c_index'])},{_fmt(row['std_c_index'])},{folds}")
        print(f"{row['variant']:12s} mean c-index {row['mean_c_index']:.5f} "
              f"(std {row['std_c_index']:.5f})")
    _write_text(os.path.join(out_dir, "ablation.csv"), "\n".join(lines) + "\n")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="dsca",
        description="dual-stream cross-attention survival model toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key (repeatable)")

    common(sub.add_parser("synth", help="generate a synthetic cohort"))
    common(sub.add_parser("train", help="k-fold cross-validated training"))
    p_eval = sub.add_parser("eval", help="risk metrics, stratification, KM curves")
    common(p_eval)
    p_eval.add_argument("--params", required=True, help="trained parameters file")
    p_eval.add_argument("--manifest", help="cohort manifest (defaults to config key)")
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"))
    p_attn = sub.add_parser("export-attn", help="write attention score CSVs")
    common(p_attn)
    p_attn.add_argument("--params", required=True)
    p_attn.add_argument("--bag", required=True, help="DSB bag file")
    common(sub.add_parser("ablate", help="run configured ablation variants"))
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.build(config_path=args.config, overrides=args.set,
                              seed=args.seed, out_dir=args.out)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.params, args.manifest)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "export-attn":
            return cmd_export_attn(cfg, args.params, args.bag)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, FileNotFoundError, BadMagic, TruncatedFile,
            AlignmentViolation, NonFiniteToken, ParamsShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/numeric failures
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
