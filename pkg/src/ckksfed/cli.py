"""Command line driver.

``ckksfed run`` executes encrypted, plaintext or paired federations and
writes per-round metrics CSVs; ``ckksfed report`` aligns metrics CSVs per
round and flags divergence between series.

Settings resolve in increasing precedence: built-in defaults, the INI file
given by ``--config``, ``CKKSFED_*`` environment variables, command-line
flags.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import ckks
from .data import ENVIRONMENTS
from .errors import CkksFedError, ConfigError
from .fedavg import TrainerSpec
from .federation import Federation, FederationConfig, RoundMetrics

ENV_PREFIX = "CKKSFED_"
CSV_COLUMNS = ("round", "mode", "env", "loss", "mae", "t_train_ms", "t_encrypt_ms",
               "t_aggregate_ms", "t_decrypt_ms", "bytes")
MODES = ("encrypted", "plaintext", "paired")
TRANSPORTS = ("inproc", "tcp")


def _positive_int(v):
    v = int(v)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _non_negative_int(v):
    v = int(v)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _non_negative_float(v):
    v = float(v)
    if not v >= 0:
        raise ValueError("must be >= 0")
    return v


def _choice(options):
    def parse(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


@dataclass(frozen=True)
class Setting:
    section: str
    key: str
    parse: object
    default: object
    help: str


SETTINGS = {
    s.key: s
    for s in (
        Setting("experiment", "env", _choice(ENVIRONMENTS + ("all",)), "uniform_iid", "environment"),
        Setting("experiment", "mode", _choice(MODES), "paired", "which federations to run"),
        Setting("experiment", "out", str, "results", "output directory"),
        Setting("experiment", "transport", _choice(TRANSPORTS), "inproc", "message transport"),
        Setting("experiment", "listen", str, "127.0.0.1:0", "controller address for tcp"),
        Setting("federation", "learners", _positive_int, 8, "number of learners"),
        Setting("federation", "rounds", _non_negative_int, 25, "federation rounds"),
        Setting("federation", "seed", int, 0, "experiment seed"),
        Setting("trainer", "epochs", _positive_int, 4, "local epochs"),
        Setting("trainer", "learning_rate", _non_negative_float, 5e-5, "SGD learning rate"),
        Setting("trainer", "batch_size", _positive_int, 1, "SGD batch size"),
        Setting("ckks", "slots", _positive_int, 8192, "slots per ciphertext"),
        Setting("ckks", "scale_bits", _positive_int, 52, "log2 of the encoding scale"),
        Setting("ckks", "depth", _positive_int, 2, "multiplicative depth"),
        Setting("ckks", "security_bits", _choice((128,)), 128, "security level"),
    )
}


def _coerce_security(v):
    return int(v)


def _key_lines(path: Path) -> dict[tuple[str, str], int]:
    """Line number of every ``key = value`` entry, by section."""
    lines = {}
    section = None
    for no, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.strip()
        if not text or text[0] in "#;":
            continue
        if text.startswith("[") and text.endswith("]"):
            section = text[1:-1].strip()
            lines.setdefault((section, ""), no)
        elif section is not None:
            for sep in ("=", ":"):
                if sep in text:
                    lines.setdefault((section, text.split(sep, 1)[0].strip().lower()), no)
                    break
    return lines


def load_config_file(path) -> dict:
    """Parse an INI experiment file into ``{key: value}``; errors carry
    ``path:line`` diagnostics."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    where = _key_lines(path)
    values, problems = {}, []
    for section in parser.sections():
        known = {s.key for s in SETTINGS.values() if s.section == section}
        if not known:
            problems.append(f"{path}:{where.get((section, ''), '?')}: unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            line = where.get((section, key), "?")
            if key not in known:
                problems.append(f"{path}:{line}: unknown key {key!r} in [{section}]")
                continue
            try:
                values[key] = SETTINGS[key].parse(_coerce_security(raw) if key == "security_bits" else raw)
            except ValueError as exc:
                problems.append(f"{path}:{line}: invalid {key} = {raw!r} ({exc})")
    if problems:
        raise ConfigError("\n".join(problems))
    return values


def resolve_settings(args: argparse.Namespace, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    values = {key: s.default for key, s in SETTINGS.items()}
    if args.config:
        values.update(load_config_file(args.config))
    for key, s in SETTINGS.items():
        name = ENV_PREFIX + key.upper()
        if name in environ:
            raw = environ[name]
            try:
                values[key] = s.parse(_coerce_security(raw) if key == "security_bits" else raw)
            except ValueError as exc:
                raise ConfigError(f"environment {name}={raw!r}: {exc}") from None
    for key in SETTINGS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    return values


def build_ckks(values: dict) -> ckks.CkksParams:
    try:
        return ckks.CkksParams.create(slot_count=values["slots"], scale_bits=values["scale_bits"],
                                      max_depth=values["depth"], security_bits=values["security_bits"])
    except (CkksFedError, ValueError) as exc:
        raise ConfigError(f"invalid CKKS parameters: {exc}") from None


def federation_config(values: dict, env: str, encrypted: bool, params) -> FederationConfig:
    try:
        trainer = TrainerSpec(values["epochs"], values["learning_rate"], values["batch_size"])
        return FederationConfig(
            learner_count=values["learners"], rounds=values["rounds"], trainer=trainer,
            ckks=params, scheme=env, seed=values["seed"], transport=values["transport"],
            encrypted=encrypted, listen=values["listen"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def metrics_row(m: RoundMetrics) -> dict:
    return {
        "round": m.round, "mode": m.mode, "env": m.env, "loss": repr(m.loss), "mae": repr(m.mae),
        "t_train_ms": f"{m.t_train_ms:.3f}", "t_encrypt_ms": f"{m.t_encrypt_ms:.3f}",
        "t_aggregate_ms": f"{m.t_aggregate_ms:.3f}", "t_decrypt_ms": f"{m.t_decrypt_ms:.3f}",
        "bytes": m.bytes,
    }


def write_metrics(path: Path, rows: list[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for m in rows:
            writer.writerow(metrics_row(m))


def relative_gap(a: float, b: float) -> float:
    return abs(a - b) / abs(b) if b else (0.0 if a == b else float("inf"))


def paired_summary(env: str, plain: list[RoundMetrics], enc: list[RoundMetrics]) -> dict:
    gaps = [relative_gap(e.mae, p.mae) for p, e in zip(plain, enc)]
    return {
        "env": env,
        "rounds": len(gaps),
        "final_mae_plaintext": plain[-1].mae if plain else None,
        "final_mae_encrypted": enc[-1].mae if enc else None,
        "final_relative_gap": gaps[-1] if gaps else None,
        "max_round_relative_gap": max(gaps) if gaps else None,
    }


def _print_params(values: dict, params: ckks.CkksParams, out) -> None:
    print("resolved settings:", file=out)
    for key in SETTINGS:
        print(f"  {key} = {values[key]}", file=out)
    print("ckks parameters:", file=out)
    for key, val in params.describe().items():
        print(f"  {key} = {val}", file=out)


def cmd_run(args, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        values = resolve_settings(args)
        params = build_ckks(values)
        envs = list(ENVIRONMENTS) if values["env"] == "all" else [values["env"]]
        modes = ["plaintext", "encrypted"] if values["mode"] == "paired" else [values["mode"]]
        configs = {(env, mode): federation_config(values, env, mode == "encrypted", params)
                   for env in envs for mode in modes}
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return 2
    if args.validate_only:
        _print_params(values, params, out)
        return 0
    out_dir = Path(values["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    status = 0
    for env in envs:
        rows: list[RoundMetrics] = []
        by_mode = {}
        csv_path = out_dir / f"metrics_{env}.csv"
        try:
            for mode in modes:
                fed = Federation(configs[env, mode])
                try:
                    by_mode[mode] = fed.run()
                finally:
                    rows.extend(fed.metrics)
                    write_metrics(csv_path, rows)
        except CkksFedError as exc:
            print(f"run failed for {env}: {exc}", file=err)
            status = 1
            continue
        print(f"{env}: wrote {len(rows)} rows to {csv_path}", file=out)
        if values["mode"] == "paired":
            summary = paired_summary(env, by_mode["plaintext"], by_mode["encrypted"])
            (out_dir / f"summary_{env}.json").write_text(json.dumps(summary, indent=2) + "\n")
            if summary["rounds"]:
                print(f"{env}: final MAE plaintext {summary['final_mae_plaintext']:.6f} "
                      f"encrypted {summary['final_mae_encrypted']:.6f} "
                      f"relative gap {summary['final_relative_gap']:.3e} "
                      f"(max per round {summary['max_round_relative_gap']:.3e})", file=out)
    return status


# --- report ---------------------------------------------------------------


def read_metrics(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise ConfigError(f"{path}: schema error, missing column(s) {', '.join(missing)}")
            rows = []
            for line, row in enumerate(reader, start=2):
                try:
                    rows.append({"round": int(row["round"]), "mode": row["mode"], "env": row["env"],
                                 "mae": float(row["mae"]), "loss": float(row["loss"])})
                except (TypeError, ValueError):
                    raise ConfigError(f"{path}:{line}: malformed row") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return rows


def build_report(paths, tolerance: float = 0.02):
    """Group rows into series keyed by (file, mode) per environment and compare
    every series against the environment's reference (plaintext when present,
    else the first series)."""
    series: dict[str, dict[tuple[str, str], dict[int, float]]] = {}
    for i, path in enumerate(paths):
        for row in read_metrics(path):
            key = (f"{Path(path).name}#{i}", row["mode"])
            series.setdefault(row["env"], {}).setdefault(key, {})[row["round"]] = row["mae"]
    report = []
    for env, by_key in series.items():
        keys = list(by_key)
        ref = next((k for k in keys if k[1] == "plaintext"), keys[0])
        others = [k for k in keys if k != ref]
        rounds = sorted(set().union(*[set(v) for v in by_key.values()]))
        for r in rounds:
            ref_mae = by_key[ref].get(r)
            gaps = [relative_gap(by_key[k][r], ref_mae) for k in others
                    if r in by_key[k] and ref_mae is not None]
            gap = max(gaps) if gaps else 0.0
            report.append({
                "env": env, "round": r, "reference": ref_mae,
                "values": [by_key[k].get(r) for k in others],
                "gap": gap, "flag": "within tolerance" if gap <= tolerance else "DIVERGED",
            })
    labels = {env: [f"{k[0]}:{k[1]}" for k in by_key] for env, by_key in series.items()}
    return report, labels


def cmd_report(args, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    try:
        report, labels = build_report(args.csv, args.tolerance)
    except ConfigError as exc:
        print(f"report error: {exc}", file=err)
        return 2
    print(f"{'env':<16}{'round':>6}{'reference':>14}{'compared':>14}{'rel gap':>12}  status", file=out)
    for row in report:
        compared = row["values"][0] if row["values"] else None
        cmp = f"{compared:14.6f}" if compared is not None else f"{'-':>14}"
        ref = f"{row['reference']:14.6f}" if row["reference"] is not None else f"{'-':>14}"
        print(f"{row['env']:<16}{row['round']:>6}{ref}{cmp}{row['gap']:12.3e}  {row['flag']}", file=out)
    diverged = sum(r["flag"] == "DIVERGED" for r in report)
    print(f"{diverged} of {len(report)} rounds diverge beyond {args.tolerance:g}", file=out)
    if args.plot_data:
        with open(args.plot_data, "w") as fh:
            for env, names in labels.items():
                fh.write(f"# env={env} columns: round {' '.join(names)}\n")
                for row in (r for r in report if r["env"] == env):
                    vals = [row["reference"]] + row["values"]
                    fh.write(" ".join([str(row["round"])] + ["nan" if v is None else repr(v) for v in vals]) + "\n")
                fh.write("\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ckksfed", description="Secure FedAvg with CKKS aggregation")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run federations and write metrics")
    run.add_argument("--config", help="INI experiment file")
    run.add_argument("--validate-only", action="store_true", help="print resolved parameters and exit")
    for key, s in SETTINGS.items():
        flag = "--" + key.replace("_", "-")
        kwargs = {"dest": key, "default": None, "help": f"{s.help} (default {s.default})"}

        def checked(v, parse=s.parse, key=key):
            try:
                return parse(_coerce_security(v) if key == "security_bits" else v)
            except ValueError as exc:
                raise argparse.ArgumentTypeError(str(exc)) from None

        kwargs["type"] = checked
        run.add_argument(flag, **kwargs)
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="compare metrics CSVs")
    rep.add_argument("csv", nargs="+")
    rep.add_argument("--tolerance", type=float, default=0.02)
    rep.add_argument("--plot-data", help="write whitespace-separated series for plotting")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
