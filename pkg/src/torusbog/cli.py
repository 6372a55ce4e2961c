"""Command-line front end: config-driven workflows with a content-addressed cache.

Verbs: eval (closed-form quantities), ed (one eigensolve), study (the N sweep),
selfcheck (invariant suite). A run is fully determined by its JSON config file;
the only environment influence is the CACHE_DIR override. Heavy numerical
imports happen after --threads is applied, so BLAS pools honor the request.

Exit codes: 0 success, 2 invalid config, 3 solver non-convergence,
4 selfcheck violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import tempfile
import time

from .model import ResourceLimitError

EXIT_OK = 0
EXIT_BAD_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_SELFCHECK_FAILED = 4

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)


class ConfigError(ValueError):
    """Any schema or semantic problem with the run configuration."""


# ---------------------------------------------------------------------------
# Canonical serialization and digests
# ---------------------------------------------------------------------------


def _format_float(value: float) -> str:
    if math.isnan(value):
        return "NaN"
    if math.isinf(value):
        return "Infinity" if value > 0 else "-Infinity"
    return "%.17g" % value


def canonical_json(value) -> str:
    """Deterministic JSON: sorted keys, 17-significant-digit floats."""
    if isinstance(value, dict):
        items = sorted(value.items())
        inner = ",".join(f"{json.dumps(str(k))}:{canonical_json(v)}" for k, v in items)
        return "{" + inner + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(canonical_json(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return _format_float(value)
    if value is None:
        return "null"
    if isinstance(value, str):
        return json.dumps(value)
    raise TypeError(f"cannot serialize {type(value).__name__}")


def jsonable(value):
    """Normalize tuples and numpy scalars so round-trips compare equal."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        return float(value)
    item = getattr(value, "item", None)
    if item is not None:
        return jsonable(item())
    raise TypeError(f"cannot normalize {type(value).__name__}")


def content_digest(key_payload: dict) -> str:
    """16-byte hex digest of the canonical serialization."""
    text = canonical_json(jsonable(key_payload))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:32]


# ---------------------------------------------------------------------------
# Result cache
# ---------------------------------------------------------------------------


def cache_path(cache_dir: str, key: str) -> str:
    return os.path.join(cache_dir, f"{key}.json")


def cache_lookup(cache_dir: str, key: str, verify) -> dict | None:
    """Load a payload if present and re-verifiable; discard anything corrupt."""
    path = cache_path(cache_dir, key)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            entry = json.load(fh)
        payload = entry["payload"]
        if entry.get("key") != key or not verify(payload):
            raise ValueError("integrity check failed")
        return payload
    except FileNotFoundError:
        return None
    except (ValueError, KeyError, TypeError):
        try:
            os.remove(path)
        except OSError:
            pass
        return None


def cache_store(cache_dir: str, key: str, payload: dict, version: str) -> None:
    """Atomic write: temp file in the same directory, then rename."""
    os.makedirs(cache_dir, exist_ok=True)
    entry = {
        "key": key,
        "tool_version": version,
        "created_unix": int(time.time()),
        "payload": payload,
    }
    text = canonical_json(jsonable(entry)) + "\n"
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, cache_path(cache_dir, key))
    except BaseException:
        try:
            os.remove(tmp)
        except OSError:
            pass
        raise


def cached_compute(cache_dir, key_payload, compute, verify, version, stats):
    """Content-addressed lookup around a compute callable.

    Only payloads passing verify are stored, so every cache entry is
    re-verifiable on load. stats counts hits and misses.
    """
    if cache_dir is None:
        payload = compute()
        stats["misses"] += 1
        return payload
    key = content_digest(key_payload)
    found = cache_lookup(cache_dir, key, verify)
    if found is not None:
        stats["hits"] += 1
        return found
    payload = jsonable(compute())
    stats["misses"] += 1
    if verify(payload):
        cache_store(cache_dir, key, payload, version)
    return payload


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------


def _require_mapping(doc, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    return doc


def _check_keys(doc: dict, allowed: set[str], required: set[str], path: str) -> None:
    prefix = f"{path}." if path else ""
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key: {prefix}{key}")
    for key in required:
        if key not in doc:
            raise ConfigError(f"missing required key: {prefix}{key}")


def _as_int(doc: dict, key: str, path: str, default=None):
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{path}.{key} must be an integer")
    return v


def _as_number(doc: dict, key: str, path: str, default=None):
    if key not in doc:
        return default
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key} must be a number")
    return float(v)


def _as_bool(doc: dict, key: str, path: str, default=None):
    if key not in doc:
        return default
    v = doc[key]
    if not isinstance(v, bool):
        raise ConfigError(f"{path}.{key} must be a boolean")
    return v


def _as_str(doc: dict, key: str, path: str, default=None, choices=None):
    if key not in doc:
        return default
    v = doc[key]
    if not isinstance(v, str):
        raise ConfigError(f"{path}.{key} must be a string")
    if choices is not None and v not in choices:
        raise ConfigError(f"{path}.{key} must be one of {sorted(choices)}")
    return v


def parse_model(doc: dict):
    from . import model as model_mod

    _require_mapping(doc, "model")
    _check_keys(
        doc,
        allowed={"d", "N", "lambda", "mode_cutoff", "include_zero_mode", "potential"},
        required={"d", "N", "mode_cutoff", "potential"},
        path="model",
    )
    d = _as_int(doc, "d", "model")
    if d < 1:
        raise ConfigError("model.d must be a positive integer")
    n = _as_int(doc, "N", "model")
    lam = _as_number(doc, "lambda", "model")
    cutoff = _as_number(doc, "mode_cutoff", "model")
    include_zero = _as_bool(doc, "include_zero_mode", "model", default=True)
    pot_doc = _require_mapping(doc["potential"], "model.potential")
    _check_keys(
        pot_doc,
        allowed={"entries", "support_radius", "offset_log"},
        required={"entries"},
        path="model.potential",
    )
    entries_doc = pot_doc["entries"]
    if not isinstance(entries_doc, list):
        raise ConfigError("model.potential.entries must be a list")
    entries = []
    for i, row in enumerate(entries_doc):
        where = f"model.potential.entries[{i}]"
        if not isinstance(row, list) or len(row) != d + 1:
            raise ConfigError(f"{where} must be a list of {d} integer coordinates and a value")
        coords = row[:d]
        value = row[d]
        if any(isinstance(c, bool) or not isinstance(c, int) for c in coords):
            raise ConfigError(f"{where} coordinates must be integers")
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} value must be a number")
        entries.append((model_mod.Momentum(coords), float(value)))
    support = _as_number(pot_doc, "support_radius", "model.potential")
    if support is None:
        support = max((p.norm for p, _ in entries), default=0.0)
    offset_log = _as_number(pot_doc, "offset_log", "model.potential", default=0.0)
    try:
        potential = model_mod.PotentialSpec(tuple(entries), support, offset_log)
        return model_mod.TorusModel(
            d=d,
            N=n,
            potential=potential,
            mode_cutoff=cutoff,
            lam=lam,
            include_zero_mode=include_zero,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_ed(doc: dict | None):
    from . import fock_ed

    ed_doc = _require_mapping(doc, "ed") if doc is not None else {}
    _check_keys(
        ed_doc,
        allowed={
            "tol",
            "max_iter",
            "seed",
            "dense_threshold",
            "k",
            "momentum_sector",
            "hamiltonian",
            "excitation_cutoff",
        },
        required=set(),
        path="ed",
    )
    settings = fock_ed.EDSettings(
        tol=_as_number(ed_doc, "tol", "ed", default=1e-9),
        max_iter=_as_int(ed_doc, "max_iter", "ed", default=1000),
        seed=_as_int(ed_doc, "seed", "ed", default=0),
        dense_threshold=_as_int(ed_doc, "dense_threshold", "ed", default=2000),
        k=_as_int(ed_doc, "k", "ed", default=1),
    )
    sector = None
    if "momentum_sector" in ed_doc and ed_doc["momentum_sector"] is not None:
        raw = ed_doc["momentum_sector"]
        if not isinstance(raw, list) or any(
            isinstance(c, bool) or not isinstance(c, int) for c in raw
        ):
            raise ConfigError("ed.momentum_sector must be a list of integers or null")
        sector = raw
    hamiltonian = _as_str(
        ed_doc, "hamiltonian", "ed", default="particle", choices={"particle", "pair"}
    )
    cutoff = _as_int(ed_doc, "excitation_cutoff", "ed")
    return settings, sector, hamiltonian, cutoff


def parse_hb(doc: dict | None) -> dict:
    hb_doc = _require_mapping(doc, "hb") if doc is not None else {}
    _check_keys(
        hb_doc,
        allowed={"start_cutoff", "max_cutoff", "cutoff_delta"},
        required=set(),
        path="hb",
    )
    return {
        "start_cutoff": _as_int(hb_doc, "start_cutoff", "hb", default=6),
        "max_cutoff": _as_int(hb_doc, "max_cutoff", "hb", default=60),
        "cutoff_delta": _as_number(hb_doc, "cutoff_delta", "hb", default=1e-10),
    }


def parse_study(doc: dict | None):
    if doc is None:
        raise ConfigError("missing required key: study")
    study_doc = _require_mapping(doc, "study")
    _check_keys(
        study_doc,
        allowed={"N_values", "coupling_c", "fit_model", "with_overlap", "check_global"},
        required={"N_values"},
        path="study",
    )
    raw = study_doc["N_values"]
    if (
        not isinstance(raw, list)
        or not raw
        or any(isinstance(v, bool) or not isinstance(v, int) for v in raw)
    ):
        raise ConfigError("study.N_values must be a non-empty list of integers")
    return {
        "N_values": tuple(raw),
        "coupling_c": _as_number(study_doc, "coupling_c", "study", default=1.0),
        "fit_model": _as_str(
            study_doc, "fit_model", "study", default="1/N", choices={"1/N", "1/N+1/N2"}
        ),
        "with_overlap": _as_bool(study_doc, "with_overlap", "study", default=True),
        "check_global": _as_bool(study_doc, "check_global", "study", default=True),
    }


def load_config(path: str, verb: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    _require_mapping(doc, "")
    _check_keys(
        doc,
        allowed={"workflow", "model", "ed", "hb", "study", "cache_dir"},
        required=set(),
        path="",
    )
    workflow = _as_str(doc, "workflow", "config", choices={"eval", "ed", "study", "selfcheck"})
    if workflow is not None and workflow != verb:
        raise ConfigError(f"config workflow {workflow!r} does not match the {verb!r} verb")
    cache_dir = _as_str(doc, "cache_dir", "config")
    parsed: dict = {"cache_dir": cache_dir}
    if "model" in doc:
        parsed["model"] = parse_model(doc["model"])
    elif verb != "selfcheck":
        raise ConfigError("missing required key: model")
    parsed["ed"], parsed["momentum_sector"], parsed["hamiltonian"], parsed["excitation_cutoff"] = parse_ed(
        doc.get("ed")
    )
    parsed["hb"] = parse_hb(doc.get("hb"))
    if verb == "study":
        parsed["study"] = parse_study(doc.get("study"))
    elif "study" in doc:
        parsed["study"] = parse_study(doc.get("study"))
    return parsed


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------


def write_report(out_dir: str, report: dict) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(jsonable(report)) + "\n")
    return path


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return _format_float(value)
    return str(value)


def write_modes_csv(out_dir: str, solution) -> str:
    path = os.path.join(out_dir, "modes.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("p_coords,w_hat,e_p,alpha_p,n_p,eB_summand\n")
        for mq in solution.modes:
            coords = ";".join(str(c) for c in mq.p)
            row = [coords] + [
                _csv_cell(v)
                for v in (mq.w_hat, mq.e_p, mq.alpha_p, mq.n_p, mq.eB_summand)
            ]
            fh.write(",".join(row) + "\n")
    return path


STUDY_COLUMNS = (
    "N",
    "lambda",
    "E_N",
    "E_Nm1",
    "deltaE",
    "leading_term",
    "residual_r",
    "prediction",
    "abs_err",
    "converged",
)


def write_study_csv(out_dir: str, records: list[dict], prediction: float) -> str:
    path = os.path.join(out_dir, "study.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(STUDY_COLUMNS) + "\n")
        for rec in records:
            row = (
                rec["N"],
                rec["lam"],
                rec["E_N"],
                rec["E_Nm1"],
                rec["delta_E"],
                rec["leading_term"],
                rec["residual_r"],
                prediction,
                abs(rec["residual_r"] - prediction),
                rec["converged"],
            )
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")
    return path


# ---------------------------------------------------------------------------
# Workflows
# ---------------------------------------------------------------------------


def _version() -> str:
    from . import __version__

    return __version__


def run_eval(parsed: dict, out_dir: str) -> int:
    from . import bogoliubov

    model = parsed["model"]
    solution = bogoliubov.solve(model)
    predictions = bogoliubov.predict_energies(model)
    report = {
        "workflow": "eval",
        "tool_version": _version(),
        "model": model.to_canonical_dict(),
        "results": {
            "e_B": solution.e_B,
            "e_B_tail_bound": solution.e_B_tail_bound,
            "D": solution.D,
            "D_tail_bound": solution.D_tail_bound,
            "gse_prediction": predictions.gse,
            "gse_tail_bound": predictions.gse_tail_bound,
            "binding_prediction": predictions.binding,
            "binding_tail_bound": predictions.binding_tail_bound,
            "leading_gse": predictions.leading_gse,
            "leading_binding": predictions.leading_binding,
            "hb_lower_bound_constant": bogoliubov.hb_lower_bound_constant(model),
            "quasifree_vacuum_overlap": bogoliubov.quasifree_vacuum_overlap(solution),
        },
    }
    write_report(out_dir, report)
    write_modes_csv(out_dir, solution)
    return EXIT_OK


def _ed_observables(result, basis) -> dict | None:
    from . import fock_ed

    if not result.vector_reliable:
        return None
    return {
        "nplus": fock_ed.expect_nplus(result.ground_vector, basis),
        "nplus2": fock_ed.expect_nplus2(result.ground_vector, basis),
        "momentum": list(fock_ed.expect_total_momentum(result.ground_vector, basis)),
    }


def _ed_payload(result, basis, tol: float) -> dict:
    return {
        "eigenvalues": list(result.eigenvalues),
        "residual_norm": result.residual_norm,
        "iterations": result.iterations,
        "converged": result.converged,
        "method": result.method,
        "gap": result.gap,
        "vector_reliable": result.vector_reliable,
        "dimension": basis.size,
        "tol": tol,
        "observables": _ed_observables(result, basis),
    }


def _verify_ed_payload(payload) -> bool:
    try:
        return (
            bool(payload["converged"])
            and float(payload["residual_norm"]) <= float(payload["tol"])
        )
    except (KeyError, TypeError, ValueError):
        return False


def run_ed(parsed: dict, out_dir: str, cache_dir: str | None) -> int:
    from . import fock_ed
    from .model import Momentum

    model = parsed["model"]
    settings = parsed["ed"]
    stats = {"hits": 0, "misses": 0}
    version = _version()

    if parsed["hamiltonian"] == "pair":
        cutoff = parsed["excitation_cutoff"]
        if cutoff is None:
            raise ConfigError("missing required key: ed.excitation_cutoff")

        def compute() -> dict:
            nonzero = model.nonzero_modes()
            basis_a, ham_a = fock_ed.build_bogoliubov_hamiltonian(
                nonzero, cutoff, model.potential
            )
            res_a = fock_ed.lowest_eigenpairs(
                ham_a, settings.k, settings.tol, settings.max_iter, settings.seed,
                settings.dense_threshold,
            )
            basis_b, ham_b = fock_ed.build_bogoliubov_hamiltonian(
                nonzero, cutoff + 2, model.potential
            )
            res_b = fock_ed.lowest_eigenpairs(
                ham_b, settings.k, settings.tol, settings.max_iter, settings.seed,
                settings.dense_threshold,
            )
            delta = abs(res_b.ground_energy - res_a.ground_energy)
            payload = _ed_payload(res_b, basis_b, settings.tol)
            payload["excitation_cutoff"] = cutoff + 2
            payload["cutoff_delta"] = delta
            payload["converged"] = bool(
                res_a.converged
                and res_b.converged
                and delta < parsed["hb"]["cutoff_delta"]
            )
            return payload

        key_payload = {
            "op": "ed-pair",
            "tool_version": version,
            "model": model.to_canonical_dict(),
            "ed": {
                "tol": settings.tol,
                "max_iter": settings.max_iter,
                "seed": settings.seed,
                "dense_threshold": settings.dense_threshold,
                "k": settings.k,
                "excitation_cutoff": cutoff,
            },
            "cutoff_delta": parsed["hb"]["cutoff_delta"],
        }
    else:
        sector_raw = parsed["momentum_sector"]
        sector = Momentum(sector_raw) if sector_raw is not None else None
        if sector is not None and sector.d != model.d:
            raise ConfigError("ed.momentum_sector dimension does not match model.d")

        def compute() -> dict:
            basis = fock_ed.enumerate_basis(
                model.mode_set(), n_particles=model.N, momentum_sector=sector
            )
            ham = fock_ed.build_hamiltonian(model, basis)
            result = fock_ed.lowest_eigenpairs(
                ham, settings.k, settings.tol, settings.max_iter, settings.seed,
                settings.dense_threshold,
            )
            return _ed_payload(result, basis, settings.tol)

        key_payload = {
            "op": "ed-particle",
            "tool_version": version,
            "model": model.to_canonical_dict(),
            "ed": {
                "tol": settings.tol,
                "max_iter": settings.max_iter,
                "seed": settings.seed,
                "dense_threshold": settings.dense_threshold,
                "k": settings.k,
            },
            "momentum_sector": list(sector) if sector is not None else None,
        }

    before = dict(stats)
    payload = cached_compute(
        cache_dir, key_payload, compute, _verify_ed_payload, version, stats
    )
    report = {
        "workflow": "ed",
        "tool_version": version,
        "model": model.to_canonical_dict(),
        "cache_hit": stats["hits"] > before["hits"],
        "result": payload,
    }
    write_report(out_dir, report)
    return EXIT_OK if payload["converged"] else EXIT_NOT_CONVERGED


def run_study(parsed: dict, out_dir: str, cache_dir: str | None) -> int:
    from dataclasses import asdict

    from . import asymptotics

    version = _version()
    study = parsed["study"]
    try:
        config = asymptotics.SweepConfig(
            base=parsed["model"],
            N_values=study["N_values"],
            coupling_c=study["coupling_c"],
            fit_model=study["fit_model"],
            ed=parsed["ed"],
            hb_start_cutoff=parsed["hb"]["start_cutoff"],
            hb_max_cutoff=parsed["hb"]["max_cutoff"],
            hb_cutoff_delta=parsed["hb"]["cutoff_delta"],
            with_overlap=study["with_overlap"],
            check_global=study["check_global"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    stats = {"hits": 0, "misses": 0}
    settings = parsed["ed"]

    def verify_record(payload) -> bool:
        try:
            return (
                bool(payload["converged"])
                and float(payload["residual_norm_N"]) <= settings.tol
                and float(payload["residual_norm_Nm1"]) <= settings.tol
            )
        except (KeyError, TypeError, ValueError):
            return False

    def loader(cfg, n, hb):
        key_payload = {
            "op": "study-record",
            "tool_version": version,
            "model": cfg.base.to_canonical_dict(),
            "N": n,
            "coupling_c": cfg.coupling_c,
            "ed": asdict(cfg.ed),
            "hb": {
                "start_cutoff": cfg.hb_start_cutoff,
                "max_cutoff": cfg.hb_max_cutoff,
                "cutoff_delta": cfg.hb_cutoff_delta,
            },
            "with_overlap": cfg.with_overlap,
            "check_global": cfg.check_global,
        }

        def compute() -> dict:
            return asdict(asymptotics.binding_record(cfg, n, hb))

        payload = cached_compute(
            cache_dir, key_payload, compute, verify_record, version, stats
        )
        return asymptotics.StudyRecord(**payload)

    report_obj = asymptotics.run_binding_study(config, record_loader=loader)
    records = [asdict(rec) for rec in report_obj.records]
    fit = None
    if report_obj.fit is not None:
        fit = {
            "r_inf": report_obj.fit.r_inf,
            "coefficients": list(report_obj.fit.coefficients),
            "max_deviation": report_obj.fit.max_deviation,
            "model": report_obj.fit.model,
            "n_used": report_obj.fit.n_used,
            "ok": report_obj.fit.ok,
        }
    report = {
        "workflow": "study",
        "tool_version": version,
        "model": parsed["model"].to_canonical_dict(),
        "study": {
            "N_values": list(config.N_values),
            "coupling_c": config.coupling_c,
            "fit_model": config.fit_model,
        },
        "prediction": report_obj.prediction,
        "e_B": report_obj.e_B,
        "D": report_obj.D,
        "e_B_tail_bound": report_obj.e_B_tail_bound,
        "D_tail_bound": report_obj.D_tail_bound,
        "fit": fit,
        "hb_cutoff_used": report_obj.hb_cutoff_used,
        "hb_cutoff_delta": report_obj.hb_cutoff_delta,
        "records": records,
        "cache": stats,
    }
    write_report(out_dir, report)
    write_study_csv(out_dir, records, report_obj.prediction)
    all_converged = all(rec["converged"] for rec in records)
    if not all_converged or report_obj.fit is None:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def default_selfcheck_model():
    from .model import PotentialSpec, TorusModel

    potential = PotentialSpec.from_table({(1,): 1.0, (-1,): 1.0})
    return TorusModel(d=1, N=6, potential=potential, mode_cutoff=2.0 * math.pi * 1.25)


def run_selfcheck(parsed: dict, out_dir: str) -> int:
    from dataclasses import replace

    import numpy as np

    from . import bogoliubov, fock_ed
    from .model import (
        normalize_zero_mode,
        real_space_eval,
        validate_potential,
        zero_momentum,
    )

    model = parsed.get("model") or default_selfcheck_model()
    settings = parsed["ed"]
    hb_knobs = parsed["hb"]
    checks: list[dict] = []

    def record(name: str, ok: bool, detail: str) -> None:
        checks.append({"name": name, "ok": bool(ok), "detail": detail})

    report_lines = validate_potential(model.potential)
    record("potential_valid", not report_lines, "; ".join(report_lines) or "valid")

    mode_set = set(model.mode_set())
    record(
        "mode_set_negation_closed",
        all(-p in mode_set for p in mode_set),
        f"{len(mode_set)} modes",
    )

    coeff_bound = model.potential.coefficient_sum
    worst_eval = 0.0
    for i in range(17):
        x = [((i * 0.0625) + 0.013 * axis) % 1.0 for axis in range(model.d)]
        worst_eval = max(worst_eval, abs(real_space_eval(model.potential, x)))
    record(
        "real_space_range",
        worst_eval <= coeff_bound * (1.0 + 1e-12),
        f"max |w(x)| {worst_eval:.6e} vs bound {coeff_bound:.6e}",
    )

    solution = bogoliubov.solve(model)
    worst_quad = 0.0
    worst_pair = 0.0
    worst_range = True
    worst_summand = True
    for mq in solution.modes:
        if mq.w_hat == 0.0:
            continue
        p2 = mq.p.norm2
        lhs = mq.w_hat * (1.0 + mq.alpha_p**2)
        rhs = 2.0 * (p2 + mq.w_hat) * mq.alpha_p
        worst_quad = max(worst_quad, abs(lhs - rhs) / max(abs(lhs), 1e-300))
        pair_lhs = 2.0 * mq.eB_summand
        pair_rhs = mq.alpha_p * mq.w_hat
        worst_pair = max(
            worst_pair, abs(pair_lhs - pair_rhs) / max(abs(pair_rhs), 1e-300)
        )
        worst_range = worst_range and 0.0 <= mq.alpha_p < 1.0
        s = mq.eB_summand
        worst_summand = worst_summand and -1e-15 <= s <= mq.w_hat**2 / (2.0 * p2) * (1 + 1e-12)
    record("quadratic_relation", worst_quad <= 1e-12, f"max relative residual {worst_quad:.3e}")
    record("pair_identity", worst_pair <= 1e-12, f"max relative residual {worst_pair:.3e}")
    record("alpha_range", worst_range, "0 <= alpha < 1")
    record("eB_summand_bounds", worst_summand, "0 <= s_p <= w^2/(2|p|^2)")

    hb = fock_ed.converged_bogoliubov_ground(
        model.nonzero_modes(),
        model.potential,
        start_cutoff=hb_knobs["start_cutoff"],
        max_cutoff=hb_knobs["max_cutoff"],
        cutoff_delta=hb_knobs["cutoff_delta"],
        settings=settings,
    )
    record(
        "hb_cutoff_converged",
        hb.converged,
        f"cutoff {hb.cutoff_used}, delta {hb.delta_achieved:.3e}",
    )
    hb_dev = abs(hb.result.ground_energy - solution.e_B)
    record("hb_ground_matches_eB", hb_dev < 1e-8, f"|ground - e_B| = {hb_dev:.3e}")
    if hb.result.vector_reliable:
        worst_occ = 0.0
        worst_pair = 0.0
        for mq in solution.modes:
            if mq.w_hat == 0.0:
                continue
            occ = fock_ed.expect_mode_occupation(hb.result.ground_vector, hb.basis, mq.p)
            pair = fock_ed.expect_pairing(hb.result.ground_vector, hb.basis, mq.p)
            worst_occ = max(worst_occ, abs(occ - mq.n_p))
            worst_pair = max(worst_pair, abs(pair - mq.m_p))
        record("quasifree_occupation", worst_occ <= 1e-6, f"max |n_p dev| {worst_occ:.3e}")
        record("quasifree_pairing", worst_pair <= 1e-6, f"max |m_p dev| {worst_pair:.3e}")

    n_check = min(model.N, 4)
    ident_model = model
    if model.N != n_check:
        ident_model = replace(model, N=n_check, lam=model.lam)
    residuals = fock_ed.operator_identity_residuals(ident_model)
    record(
        "double_commutator_identity",
        residuals.residual_a <= 1e-10,
        f"residual {residuals.residual_a:.3e}",
    )
    record(
        "number_identity",
        residuals.residual_b <= 1e-8,
        f"relative residual {residuals.residual_b:.3e}",
    )

    sandwich_model = model
    if model.N > 6:
        sandwich_model = replace(model, N=6, lam=model.lam)
    sandwich = fock_ed.variational_sandwich(sandwich_model, settings)
    ok_sandwich = (
        sandwich.lower - 1e-9 <= sandwich.delta_E <= sandwich.upper + 1e-9
    )
    record(
        "variational_sandwich",
        ok_sandwich,
        f"lower {sandwich.lower:.6e} <= dE {sandwich.delta_E:.6e} <= upper {sandwich.upper:.6e}",
    )
    record(
        "norm_identities",
        sandwich.norm_identity_dev_N <= 1e-10 and sandwich.norm_identity_dev_Nm1 <= 1e-10,
        f"devs {sandwich.norm_identity_dev_N:.3e}, {sandwich.norm_identity_dev_Nm1:.3e}",
    )

    basis = fock_ed.enumerate_basis(
        model.mode_set(), n_particles=n_check, momentum_sector=zero_momentum(model.d)
    )
    ham = fock_ed.build_hamiltonian(ident_model, basis)
    rng = np.random.default_rng(settings.seed)
    worst_sym = 0.0
    worst_low = 0.0
    exc = basis.excitation_counts().astype(float)
    w_total = model.potential.coefficient_sum
    gap_const = (2.0 * math.pi) ** 2
    for _ in range(20):
        u = rng.standard_normal(basis.size)
        v = rng.standard_normal(basis.size)
        sym = abs(u @ (ham @ v) - (ham @ u) @ v)
        worst_sym = max(worst_sym, sym / (np.linalg.norm(u) * np.linalg.norm(v)))
        w = v / np.linalg.norm(v)
        energy = float(w @ (ham @ w))
        bound = gap_const * float((w * w) @ exc) - ident_model.lam * n_check * w_total / 2.0
        worst_low = max(worst_low, bound - energy)
    record("hermiticity", worst_sym <= 1e-10, f"max asymmetry {worst_sym:.3e}")
    record(
        "condensation_lower_bound",
        worst_low <= 1e-9,
        f"max violation {worst_low:.3e}",
    )

    full = fock_ed.enumerate_basis(model.mode_set(), n_particles=n_check)
    ham_full = fock_ed.build_hamiltonian(ident_model, full).tocoo()
    sectors = [full.total_momentum(s) for s in full.states]
    off_sector = sum(
        1
        for i, j, v in zip(ham_full.row, ham_full.col, ham_full.data)
        if v != 0.0 and sectors[i] != sectors[j]
    )
    record(
        "momentum_block_diagonal",
        off_sector == 0,
        f"{off_sector} entries cross momentum sectors",
    )

    res_orig = fock_ed.lowest_eigenpairs(ham, 1, settings.tol, settings.max_iter,
                                         settings.seed, settings.dense_threshold)
    w0 = model.potential.w_zero
    trial_energy = ident_model.lam * w0 * n_check * (n_check - 1) / 2.0
    record(
        "condensate_upper_bound",
        res_orig.ground_energy <= trial_energy + 1e-9,
        f"E0 {res_orig.ground_energy:.6e} <= trial {trial_energy:.6e}",
    )

    shifted, offset = normalize_zero_mode(model.potential)
    if shifted is not model.potential:
        shifted_model = replace(ident_model, potential=shifted)
        ham_shift = fock_ed.build_hamiltonian(shifted_model, basis)
        res_shift = fock_ed.lowest_eigenpairs(ham_shift, 1, settings.tol, settings.max_iter,
                                              settings.seed, settings.dense_threshold)
        lhs = res_shift.ground_energy + offset(ident_model.lam, n_check)
        dev = abs(lhs - res_orig.ground_energy) / max(1.0, abs(res_orig.ground_energy))
        record("zero_mode_offset_exact", dev <= 1e-10, f"relative dev {dev:.3e}")

    violations = [c for c in checks if not c["ok"]]
    for c in checks:
        status = "ok" if c["ok"] else "VIOLATION"
        print(f"selfcheck {c['name']}: {status} ({c['detail']})")
    report = {
        "workflow": "selfcheck",
        "tool_version": _version(),
        "model": model.to_canonical_dict(),
        "checks": checks,
        "violations": len(violations),
    }
    write_report(out_dir, report)
    return EXIT_SELFCHECK_FAILED if violations else EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="torusbog",
        description="Quasi-free predictions and exact-diagonalization checks "
        "for bosons on the unit torus",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, needs_config in (
        ("eval", True),
        ("ed", True),
        ("study", True),
        ("selfcheck", False),
    ):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=needs_config, default=None)
        p.add_argument("--out", default=".")
        p.add_argument("--cache", default=None)
        p.add_argument("--threads", type=int, default=None)
    return parser


def _apply_threads(threads: int | None) -> None:
    if threads is None:
        return
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args.threads)
        if args.config is not None:
            parsed = load_config(args.config, args.verb)
        else:
            parsed = {"cache_dir": None, "ed": None, "hb": parse_hb(None)}
            if args.verb == "selfcheck":
                from . import fock_ed

                parsed["ed"] = fock_ed.EDSettings()
            else:
                raise ConfigError("missing required key: --config")
        if parsed.get("ed") is None:
            from . import fock_ed

            parsed["ed"] = fock_ed.EDSettings()
        cache_dir = args.cache or os.environ.get("CACHE_DIR") or parsed.get("cache_dir")
        if args.verb == "eval":
            return run_eval(parsed, args.out)
        if args.verb == "ed":
            return run_ed(parsed, args.out, cache_dir)
        if args.verb == "study":
            return run_study(parsed, args.out, cache_dir)
        return run_selfcheck(parsed, args.out)
    except (ConfigError, ResourceLimitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
