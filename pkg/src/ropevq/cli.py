"""``ropevq`` command-line tool.

Every subcommand writes its artifacts and a JSON report into ``--out``
and prints the report to stdout. Failures print a JSON error object to
stderr and exit with a code from :data:`EXIT_CODES`.
"""

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from . import formats
from .attention import AttnInput, fused_attention, naive_quantized_attention
from .baselines import (
    AsymmetricQuantizer,
    Identity,
    mse_report,
    random_code_baseline,
    report_to_csv,
    report_to_jsonl,
)
from .cache import CacheStats, prefill
from .errors import CorruptCodeError, TrainingError
from .keyquant import (
    CommutativeKeyQuantizer,
    EmConfig,
    KeyCodebook,
    KeyQuantConfig,
    avg_bit_key,
    decode_keys,
    encode_keys,
    key_codebook_bytes,
    train_key_codebook,
)
from .rope import RopeParams
from .synth import gen_planted_keys, gen_synth
from .valquant import (
    AdditiveValueQuantizer,
    ValTrainConfig,
    ValueCodebook,
    ValueEncoder,
    avg_bit_value,
    decode_values,
    encoder_forward,
    train_value_quantizer,
    value_codebook_bytes,
)

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "missing_file": 4,
    "corrupt_input": 5,
    "training": 6,
}
MIB = 1 << 20


class CliError(Exception):
    def __init__(self, kind, message, details=None):
        super().__init__(message)
        self.kind = kind
        self.details = details or {}


PRESETS = {
    "1bit": {"group_size": 64, "n_levels": 64, "rounds": 11, "codes_per_dim": 1},
    "2bit": {"group_size": 64, "n_levels": 64, "rounds": 21, "codes_per_dim": 2},
}


@dataclass
class RunConfig:
    """Everything a run needs. ``n_codes=None`` means ``codes_per_dim * d``."""

    seed: int = 0
    d: int | None = None
    group_size: int = 64
    n_levels: int = 64
    rounds: int = 11
    n_codes: int | None = None
    codes_per_dim: int = 1
    hidden: int | None = None
    value_steps: int = 10_000
    value_batch: int = 256
    value_lr: float = 1e-3
    optimizer: str = "adam"
    gumbel_t_start: float = 1.0
    gumbel_t_end: float = 0.1
    soft_iters: int = 30
    hard_iters_max: int = 100
    t0: float | None = None
    decay: float = 0.9
    tol: float = 1e-6
    ridge: float | None = None
    n_init: int = 1
    search: str = "factorized"

    def resolved_n_codes(self, d):
        return self.n_codes if self.n_codes is not None else self.codes_per_dim * d

    def key_config(self, d):
        return KeyQuantConfig(d, self.group_size, self.n_levels, self.rounds)

    def em_config(self):
        return EmConfig(self.soft_iters, self.hard_iters_max, self.t0, self.decay,
                        self.tol, self.ridge, self.seed, self.search, self.n_init)

    def value_config(self):
        return ValTrainConfig(self.value_steps, self.value_batch, self.value_lr,
                              self.gumbel_t_start, self.gumbel_t_end, self.seed,
                              self.optimizer, self.hidden)

    def validate(self, d=None, keys=True):
        """Check every module precondition that is knowable up front."""
        d = self.d if d is None else d
        try:
            if self.seed < 0:
                raise ValueError("seed must be non-negative")
            self.em_config()
            self.value_config()
            if self.codes_per_dim < 1:
                raise ValueError("codes_per_dim must be >= 1")
            if d is not None:
                if keys:
                    self.key_config(d)
                if self.resolved_n_codes(d) < 1:
                    raise ValueError("n_codes must be >= 1")
        except (ValueError, TypeError) as exc:
            raise CliError("config", str(exc)) from exc
        return self


def build_config(args):
    values = {}
    if args.preset:
        values.update(PRESETS[args.preset])
    if args.config:
        values.update(_read_json(args.config))
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise CliError("config", f"--set expects KEY=VALUE, got {item!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    if args.seed is not None:
        values["seed"] = args.seed
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError("config", f"unknown config keys: {unknown}")
    return RunConfig(**values).validate()


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise CliError("missing_file", f"no such file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise CliError("config", f"invalid JSON in {path}: {exc}") from exc


def _load(loader, path, *extra):
    try:
        return loader(path, *extra)
    except FileNotFoundError as exc:
        raise CliError("missing_file", f"no such file: {path}") from exc
    except (CorruptCodeError, ValueError) as exc:
        raise CliError("corrupt_input", f"{path}: {exc}") from exc


def _load_matrix(path):
    X = _load(formats.load_tensor, path)
    if X.ndim != 2:
        raise CliError("corrupt_input", f"{path}: expected a 2-D tensor, got shape {X.shape}")
    return X.astype(np.float64)


def _parse_ints(text):
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError("config", f"expected comma-separated integers, got {text!r}") from exc
    if not out or min(out) < 1:
        raise CliError("config", f"expected positive integers, got {text!r}")
    return out


def _key_estimator(cb):
    est = CommutativeKeyQuantizer(cb.config.group_size, cb.config.n_levels, cb.config.rounds)
    est.codebook_ = cb
    est.n_features_in_ = cb.config.d
    return est


def _value_estimator(enc, cb):
    est = AdditiveValueQuantizer(n_codes=cb.n_codes)
    est.encoder_, est.codebook_ = enc, cb
    est.n_features_in_ = cb.d
    return est


def _mse(a, b):
    return float(np.mean((a - b) ** 2))


# subcommands ---------------------------------------------------------------

def cmd_gen_synth(args, cfg, out):
    d = args.d or cfg.d or 128
    if args.planted:
        cfg.validate(d)
        X, _ = gen_planted_keys(args.n, d, cfg.group_size, cfg.n_levels, seed=cfg.seed)
        kind = "planted"
    else:
        rank = args.rank or max(1, d // 4)
        try:
            X = gen_synth(args.n, d, rank, seed=cfg.seed, mix=not args.no_mix)
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
        kind = "synthetic"
    path = os.path.join(out, args.name)
    formats.save_tensor(path, X)
    return {"kind": kind, "file": args.name, "shape": list(X.shape),
            "variance": float(np.var(X.astype(np.float64)))}


def cmd_train_key(args, cfg, out):
    X = _load_matrix(args.data)
    cfg.validate(X.shape[1])
    try:
        cb, history = train_key_codebook(X, cfg.key_config(X.shape[1]), cfg.em_config(),
                                         return_history=True)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    path = os.path.join(out, "key.cvqk")
    formats.save_key_codebook(path, cb)
    cb = formats.load_key_codebook(path)
    mse = _mse(X, decode_keys(encode_keys(X, cb), cb))
    return {
        "file": "key.cvqk",
        "config": dataclasses.asdict(cb.config),
        "avg_bit": avg_bit_key(cb.config),
        "round_mse": [h["mse"] for h in history],
        "final_mse": mse,
        "data_variance": float(np.var(X)),
    }


def cmd_train_value(args, cfg, out):
    X = _load_matrix(args.data)
    cfg.validate(X.shape[1], keys=False)
    vcfg = cfg.value_config()
    if X.shape[0] < vcfg.batch:
        vcfg = dataclasses.replace(vcfg, batch=X.shape[0])
    n_codes = cfg.resolved_n_codes(X.shape[1])
    enc, cb, losses = train_value_quantizer(X, n_codes, vcfg)
    path = os.path.join(out, "value.cvqv")
    formats.save_value_quantizer(path, enc, cb)
    enc, cb = formats.load_value_quantizer(path)
    bits, _ = encoder_forward(X, enc, mode="infer")
    return {
        "file": "value.cvqv",
        "n_codes": n_codes,
        "hidden": enc.hidden,
        "avg_bit": avg_bit_value(n_codes, X.shape[1]),
        "final_train_loss": float(losses[-1]),
        "final_mse": _mse(X, decode_values(bits, cb)),
        "random_code_mse": random_code_baseline(X, n_codes, seed=cfg.seed),
        "data_variance": float(np.var(X)),
    }


def _load_models(args):
    kcb = _load(formats.load_key_codebook, args.key_codebook)
    enc, vcb = _load(formats.load_value_quantizer, args.value_quantizer)
    if kcb.config.d != vcb.d:
        raise CliError("config", "key codebook and value quantizer widths differ")
    return kcb, enc, vcb


def cmd_quantize(args, cfg, out):
    kcb, enc, vcb = _load_models(args)
    K = _load_matrix(args.keys)
    V = _load_matrix(args.values)
    if K.shape != V.shape or K.shape[1] != kcb.config.d:
        raise CliError("config", f"keys {K.shape} and values {V.shape} must be (N, {kcb.config.d})")
    cache = prefill(K, V, kcb, enc, vcb)
    formats.save_cache(os.path.join(out, "cache.cvqc"), cache)
    return {"file": "cache.cvqc", **cache.stats().to_dict()}


def cmd_reconstruct(args, cfg, out):
    kcb, enc, vcb = _load_models(args)
    cache = _load(formats.load_cache, args.cache, kcb, enc, vcb)
    K_hat = decode_keys(cache.key_codes(), kcb)
    V_hat = decode_values(cache.value_codes(), vcb)
    formats.save_tensor(os.path.join(out, "keys_hat.ctf"), K_hat)
    formats.save_tensor(os.path.join(out, "values_hat.ctf"), V_hat)
    report = {"files": ["keys_hat.ctf", "values_hat.ctf"], "tokens": cache.n_tokens}
    if args.keys:
        report["key_mse"] = _mse(_load_matrix(args.keys), K_hat)
    if args.values:
        report["value_mse"] = _mse(_load_matrix(args.values), V_hat)
    return report


def cmd_mse_report(args, cfg, out):
    X = _load_matrix(args.data)
    methods = [("identity", Identity().fit(X))]
    for b in _parse_ints(args.bits):
        try:
            methods.append((f"asym-{b}bit", AsymmetricQuantizer(b).fit(X)))
        except ValueError as exc:
            raise CliError("config", str(exc)) from exc
    for path in args.value_quantizer or []:
        enc, vcb = _load(formats.load_value_quantizer, path)
        methods.append((f"ropevq-value:{os.path.basename(path)}", _value_estimator(enc, vcb)))
    for path in args.key_codebook or []:
        kcb = _load(formats.load_key_codebook, path)
        methods.append((f"ropevq-key:{os.path.basename(path)}", _key_estimator(kcb)))
    for name, est in methods:
        if est.n_features_in_ != X.shape[1]:
            raise CliError("config", f"method {name} expects width {est.n_features_in_}")
    rows = mse_report(X, methods)
    formats.atomic_write(os.path.join(out, "mse_report.jsonl"), report_to_jsonl(rows).encode())
    formats.atomic_write(os.path.join(out, "mse_report.csv"), report_to_csv(rows).encode())
    return {"rows": [r.to_dict() for r in rows], "data_variance": float(np.var(X))}


def _random_models(d, n_codes, key_config, rng):
    atoms = rng.standard_normal((key_config.rounds, d // 2, key_config.n_levels, 2)) * 0.1
    kcb = KeyCodebook(key_config, atoms)
    vcb = ValueCodebook(rng.standard_normal((n_codes, d)) * 0.1)
    return kcb, vcb


def cmd_bench_attn(args, cfg, out):
    d = cfg.d or 128
    cfg.validate(d)
    key_config = cfg.key_config(d)
    n_codes = cfg.resolved_n_codes(d)
    rng = np.random.default_rng(cfg.seed)
    kcb, vcb = _random_models(d, n_codes, key_config, rng)
    rope = RopeParams(d)
    rows = []
    for n in _parse_ints(args.lengths):
        kc = rng.integers(0, key_config.n_levels, (n, key_config.rounds, key_config.n_groups, 2))
        vc = rng.integers(0, 2, (n, n_codes), dtype=np.uint8)
        inp = AttnInput(rng.standard_normal(d), n - 1, kc, vc, kcb, vcb, rope)
        out_n, rep_n = naive_quantized_attention(inp)
        out_f, rep_f = fused_attention(inp)
        rows.append({
            "N": n,
            "naive": rep_n.to_dict() | {"ratio": rep_n.ratio},
            "fused": rep_f.to_dict() | {"ratio": rep_f.ratio},
            "speedup": rep_n.measured_mults / rep_f.measured_mults,
            "predicted_speedup": rep_n.predicted_mults / rep_f.predicted_mults,
            "max_rel_diff": float(np.max(np.abs(out_n - out_f)) / np.max(np.abs(out_n))),
        })
    speedups = [r["speedup"] for r in rows]
    monotone = all(b > a for a, b in zip(speedups, speedups[1:]))
    return {"d": d, "N_c": n_codes, "key_config": dataclasses.asdict(key_config),
            "rows": rows, "speedup_strictly_increasing": monotone}


def cmd_size_report(args, cfg, out):
    d = cfg.d or 1024
    cfg.validate(d)
    kc = cfg.key_config(d)
    n_codes = cfg.resolved_n_codes(d)
    stats = CacheStats.for_config(args.tokens, kc, n_codes)
    kb = key_codebook_bytes(kc.n_levels, kc.rounds, d)
    vb = value_codebook_bytes(n_codes, d)
    return {
        "d": d,
        "tokens": args.tokens,
        "key_codebook_bytes": kb,
        "value_codebook_bytes": vb,
        "key_codebook_mb": f"{kb / MIB:.2f}",
        "value_codebook_mb": f"{vb / MIB:.2f}",
        "fp16_cache_mb_per_side": f"{stats.fp16_bytes_per_side / MIB:.2f}",
        "key_avg_bit": avg_bit_key(kc),
        "value_avg_bit": avg_bit_value(n_codes, d),
        "cache": stats.to_dict(),
    }


ABLATE_G = [(8, 2), (16, 4), (32, 16), (64, 64)]


def _fit_eval(train, test, key_config, em):
    cb = train_key_codebook(train, key_config, em)
    return cb, _mse(test, decode_keys(encode_keys(test, cb), cb))


def _truncate(cb, rounds):
    return KeyCodebook(dataclasses.replace(cb.config, rounds=rounds), cb.atoms[:rounds])


def run_ablation(sweep, d, n_train, n_test, rank, em, rounds_list, seed=0):
    """Held-out key MSE for the group-size and residual-round sweeps."""
    X = gen_synth(n_train + n_test, d, rank, seed=seed).astype(np.float64)
    train, test = X[:n_train], X[n_train:]
    var = float(np.var(test))
    rows = []
    if sweep in ("g", "all"):
        for g, n_lv in ABLATE_G:
            if (d // 2) % g or n_train < n_lv ** 2:
                continue
            kc = KeyQuantConfig(d, g, n_lv, 1)
            _, mse = _fit_eval(train, test, kc, em)
            rows.append({"sweep": "g", "g": g, "n_levels": n_lv, "rounds": 1,
                         "avg_bit": avg_bit_key(kc), "mse": mse, "rel_mse": mse / var})
    if sweep in ("R", "all"):
        kc = KeyQuantConfig(d, 64, 64, max(rounds_list))
        cb = train_key_codebook(train, kc, em)
        for r in sorted(rounds_list):
            sub = _truncate(cb, r)
            mse = _mse(test, decode_keys(encode_keys(test, sub), sub))
            rows.append({"sweep": "R", "g": 64, "n_levels": 64, "rounds": r,
                         "avg_bit": avg_bit_key(sub.config), "mse": mse, "rel_mse": mse / var})
    return rows


def cmd_ablate(args, cfg, out):
    d = cfg.d or 128
    cfg.validate(d)
    try:
        rows = run_ablation(args.sweep, d, args.n_train, args.n_test,
                            args.rank or max(1, d // 8), cfg.em_config(),
                            _parse_ints(args.rounds), seed=cfg.seed)
    except ValueError as exc:
        raise CliError("config", str(exc)) from exc
    return {"d": d, "rows": rows}


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-key": cmd_train_key,
    "train-value": cmd_train_value,
    "quantize": cmd_quantize,
    "reconstruct": cmd_reconstruct,
    "mse-report": cmd_mse_report,
    "bench-attn": cmd_bench_attn,
    "size-report": cmd_size_report,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with RunConfig fields")
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config field (value parsed as JSON)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread limit")
    common.add_argument("--csv", action="store_true", help="also write a CSV mirror")

    p = argparse.ArgumentParser(prog="ropevq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-synth", parents=[common], help="write synthetic calibration data")
    s.add_argument("--n", type=int, default=4096)
    s.add_argument("--d", type=int)
    s.add_argument("--rank", type=int)
    s.add_argument("--no-mix", action="store_true", help="identity mixing matrix")
    s.add_argument("--planted", action="store_true",
                   help="keys exactly representable by one codebook round")
    s.add_argument("--name", default="synth.ctf")

    s = sub.add_parser("train-key", parents=[common], help="fit a key codebook")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train-value", parents=[common], help="fit the value encoder and codebook")
    s.add_argument("--data", required=True)

    for name in ("quantize", "reconstruct"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--key-codebook", required=True)
        s.add_argument("--value-quantizer", required=True)
        s.add_argument("--keys", required=name == "quantize")
        s.add_argument("--values", required=name == "quantize")
        if name == "reconstruct":
            s.add_argument("--cache", required=True)

    s = sub.add_parser("mse-report", parents=[common], help="compare reconstruction MSE")
    s.add_argument("--data", required=True)
    s.add_argument("--bits", default="1,2,4,8,16", help="asymmetric baseline bit widths")
    s.add_argument("--value-quantizer", action="append")
    s.add_argument("--key-codebook", action="append")

    s = sub.add_parser("bench-attn", parents=[common], help="multiply-count benchmark")
    s.add_argument("--lengths", default="1024,4096,8192")

    s = sub.add_parser("size-report", parents=[common], help="codebook and cache sizes")
    s.add_argument("--tokens", type=int, default=131072)

    s = sub.add_parser("ablate", parents=[common], help="group-size and round sweeps")
    s.add_argument("--sweep", choices=["g", "R", "all"], default="all")
    s.add_argument("--n-train", type=int, default=8192)
    s.add_argument("--n-test", type=int, default=4096)
    s.add_argument("--rank", type=int)
    s.add_argument("--rounds", default="1,3,5,8,11")
    return p


def _flatten(row, prefix=""):
    out = {}
    for k, v in row.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def rows_to_csv(rows):
    flat = [_flatten(r) for r in rows]
    fields = list(dict.fromkeys(k for r in flat for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(flat)
    return buf.getvalue()


def _emit_error(kind, message, details=None):
    code = EXIT_CODES[kind]
    obj = {"error": kind, "message": message, "exit_code": code}
    if details:
        obj["details"] = details
    print(json.dumps(obj, sort_keys=True, default=str), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _emit_error("usage", "invalid command line")
    try:
        if args.threads < 1:
            raise CliError("config", "--threads must be >= 1")
        cfg = build_config(args)
        os.makedirs(args.out, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            report = COMMANDS[args.command](args, cfg, args.out)
        report = {"command": args.command, "config": dataclasses.asdict(cfg), **report}
        text = json.dumps(report, indent=2, sort_keys=True) + "\n"
        name = args.command.replace("-", "_")
        formats.atomic_write(os.path.join(args.out, f"{name}.json"), text.encode())
        if args.csv and report.get("rows"):
            formats.atomic_write(os.path.join(args.out, f"{name}.csv"),
                                 rows_to_csv(report["rows"]).encode())
        sys.stdout.write(text)
        return 0
    except CliError as exc:
        return _emit_error(exc.kind, str(exc), exc.details)
    except TrainingError as exc:
        return _emit_error("training", str(exc), exc.diagnostics)
    except CorruptCodeError as exc:
        return _emit_error("corrupt_input", str(exc))
    except FileNotFoundError as exc:
        return _emit_error("missing_file", str(exc))
    except Exception as exc:  # noqa: BLE001
        return _emit_error("internal", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
