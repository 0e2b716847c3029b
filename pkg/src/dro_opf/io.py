"""JSON/CSV persistence for cases, datasets, policies and reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .dro import ForecastDataset, SupportPolytope
from .network import (
    CaseValidationError,
    ControllableDevice,
    DeviceCost,
    Line,
    LocalConstraints,
    NetworkCase,
    UncontrollableInjection,
)
from .policy import AffinePolicy, causality_mask

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """A dataset file cannot be parsed or has the wrong shape."""


def _arr(value, where: str, ndim: int | None = None) -> np.ndarray:
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise CaseValidationError(f"{where}: not a numeric array ({exc})") from exc
    if ndim == 2:
        a = np.atleast_2d(a)
    if ndim is not None and a.ndim != ndim:
        raise CaseValidationError(f"{where}: expected a {ndim}-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise CaseValidationError(f"{where}: non-finite entries")
    return a


def _require(doc: Mapping, key: str, where: str):
    if key not in doc:
        raise CaseValidationError(f"{where}: missing field {key!r}")
    return doc[key]


def case_from_dict(doc: Mapping[str, Any]) -> NetworkCase:
    """Parse the JSON case schema (see README) into a :class:`NetworkCase`."""
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise CaseValidationError(f"unsupported case format_version {version}")
    T = int(_require(doc, "horizon", "case"))
    n_xi = int(_require(doc, "n_xi", "case"))

    lines = []
    for k, ln in enumerate(_require(doc, "lines", "case")):
        where = f"lines[{k}]"
        lines.append(
            Line(
                from_bus=int(_require(ln, "from", where)),
                to_bus=int(_require(ln, "to", where)),
                x_pu=float(_require(ln, "x_pu", where)),
                limit_mw=float(_require(ln, "limit_mw", where)),
                limit_reverse_mw=None if ln.get("limit_reverse_mw") is None else float(ln["limit_reverse_mw"]),
            )
        )

    devices = []
    for k, d in enumerate(_require(doc, "devices", "case")):
        where = f"devices[{k}]"
        dev_id = str(_require(d, "id", where))
        where = f"device {dev_id}"
        cost = d.get("cost", {}) or {}
        opt = lambda key, nd: None if cost.get(key) is None else _arr(cost[key], f"{where}.cost.{key}", nd)  # noqa: E731
        local = None
        if d.get("local"):
            loc = d["local"]
            local = LocalConstraints(
                T_loc=_arr(_require(loc, "T", where), f"{where}.local.T", 2),
                U_loc=_arr(_require(loc, "U", where), f"{where}.local.U", 2),
                Z_loc=_arr(_require(loc, "Z", where), f"{where}.local.Z", 2),
                w=_arr(_require(loc, "w", where), f"{where}.local.w", 1),
            )
        devices.append(
            ControllableDevice(
                id=dev_id,
                bus=int(_require(d, "bus", where)),
                A_step=_arr(_require(d, "A", where), f"{where}.A", 2),
                B_step=_arr(_require(d, "B", where), f"{where}.B", 2),
                x0=_arr(_require(d, "x0", where), f"{where}.x0", 1),
                cost=DeviceCost(
                    f_x=opt("f_x", 1), H_x=opt("H_x", 2), f_u=opt("f_u", 1), H_u=opt("H_u", 2),
                    c=float(cost.get("c", 0.0)),
                ),
                local=local,
            )
        )

    injections = []
    for k, inj in enumerate(doc.get("injections", [])):
        where = f"injections[{k}]"
        injections.append(
            UncontrollableInjection(
                id=str(_require(inj, "id", where)),
                bus=int(_require(inj, "bus", where)),
                r=_arr(_require(inj, "r", where), f"{where}.r", 1),
                G=_arr(_require(inj, "G", where), f"{where}.G", 2),
            )
        )

    monitored = doc.get("monitored_lines")
    return NetworkCase(
        buses=tuple(int(b) for b in _require(doc, "buses", "case")),
        slack=int(_require(doc, "slack", "case")),
        lines=tuple(lines),
        devices=tuple(devices),
        injections=tuple(injections),
        T=T,
        N_xi=n_xi,
        monitored_lines=None if monitored is None else tuple(str(m) for m in monitored),
        same_step_recourse=bool(doc.get("same_step_recourse", False)),
        name=str(doc.get("name", "")),
    )


def case_to_dict(case: NetworkCase) -> dict[str, Any]:
    def lst(a):
        return None if a is None else np.asarray(a, dtype=float).tolist()

    devices = []
    for d in case.devices:
        entry = {
            "id": d.id,
            "bus": d.bus,
            "A": lst(d.A_step),
            "B": lst(d.B_step),
            "x0": lst(d.x0),
            "cost": {
                k: v
                for k, v in {
                    "f_x": lst(d.cost.f_x), "H_x": lst(d.cost.H_x),
                    "f_u": lst(d.cost.f_u), "H_u": lst(d.cost.H_u), "c": d.cost.c,
                }.items()
                if v is not None
            },
        }
        if d.local is not None:
            entry["local"] = {"T": lst(d.local.T_loc), "U": lst(d.local.U_loc), "Z": lst(d.local.Z_loc), "w": lst(d.local.w)}
        devices.append(entry)
    lines = []
    for ln in case.lines:
        e = {"from": ln.from_bus, "to": ln.to_bus, "x_pu": ln.x_pu, "limit_mw": ln.limit_mw}
        if ln.limit_reverse_mw is not None:
            e["limit_reverse_mw"] = ln.limit_reverse_mw
        lines.append(e)
    return {
        "format_version": FORMAT_VERSION,
        "name": case.name,
        "buses": list(case.buses),
        "slack": case.slack,
        "lines": lines,
        "devices": devices,
        "injections": [{"id": i.id, "bus": i.bus, "r": lst(i.r), "G": lst(i.G)} for i in case.injections],
        "horizon": case.T,
        "n_xi": case.N_xi,
        "same_step_recourse": case.same_step_recourse,
        "monitored_lines": None if case.monitored_lines is None else list(case.monitored_lines),
    }


def load_case(path) -> NetworkCase:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CaseValidationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return case_from_dict(doc)


def save_case(case: NetworkCase, path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1))


def support_from_case_file(path, dim: int) -> SupportPolytope:
    """Optional ``support: {H, d}`` entry of a case file; unbounded when absent."""
    doc = json.loads(Path(path).read_text())
    sup = doc.get("support")
    if not sup:
        return SupportPolytope.unbounded(dim)
    return SupportPolytope(_arr(sup["H"], "support.H", 2), _arr(sup["d"], "support.d", 1))


def shipped_case_path(name: str = "case118.json") -> Path:
    return Path(str(resources.files("dro_opf") / "data" / name))


def load_dataset(path, expected_dim: int | None = None, support: SupportPolytope | None = None) -> ForecastDataset:
    """Read an ``N x dim`` CSV of forecast errors; a non-numeric first row is a header."""
    path = Path(path)
    rows: list[list[float]] = []
    width = None
    with path.open(newline="") as fh:
        for lineno, raw in enumerate(csv.reader(fh), start=1):
            if not raw or all(not c.strip() for c in raw):
                continue
            try:
                vals = [float(c) for c in raw]
            except ValueError:
                if lineno == 1 and not rows:
                    continue  # header
                for col, c in enumerate(raw, start=1):
                    try:
                        float(c)
                    except ValueError:
                        raise DatasetError(f"{path}: row {lineno}, column {col}: non-numeric value {c!r}") from None
                raise
            bad = [col for col, v in enumerate(vals, start=1) if not math.isfinite(v)]
            if bad:
                raise DatasetError(f"{path}: row {lineno}, column {bad[0]}: non-finite value")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DatasetError(f"{path}: row {lineno} has {len(vals)} columns, expected {width}")
            rows.append(vals)
    if not rows:
        raise DatasetError(f"{path}: no samples")
    X = np.array(rows)
    if expected_dim is not None and X.shape[1] != expected_dim:
        raise DatasetError(f"{path}: dataset has {X.shape[1]} columns but the case needs n_xi*T = {expected_dim}")
    try:
        return ForecastDataset.from_array(X, support)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def save_dataset(data: ForecastDataset | np.ndarray, path, header: bool = True) -> None:
    X = data.samples if isinstance(data, ForecastDataset) else np.atleast_2d(data)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"xi{k}" for k in range(X.shape[1])])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def policy_to_dict(policy: AffinePolicy, device_ids: Iterable[str], T: int, n_xi: int) -> dict[str, Any]:
    devices = []
    for dev_id, D, e, mask in zip(device_ids, policy.D, policy.e, policy.masks):
        m = mask.shape[0] // T
        blocks = []
        for t in range(T):
            for s in range(T):
                if mask[t * m, s * n_xi]:
                    blocks.append({"row": t, "col": s, "D": D[t * m : (t + 1) * m, s * n_xi : (s + 1) * n_xi].tolist()})
        devices.append({"id": dev_id, "m": m, "e": e.tolist(), "blocks": blocks})
    return {"format_version": FORMAT_VERSION, "horizon": T, "n_xi": n_xi, "devices": devices}


def policy_from_dict(doc: Mapping[str, Any], same_step_recourse: bool = False) -> tuple[list[str], AffinePolicy]:
    T, n_xi = int(doc["horizon"]), int(doc["n_xi"])
    ids, Ds, es, masks = [], [], [], []
    for d in doc["devices"]:
        m = int(d["m"])
        mask = causality_mask(m, T, n_xi, same_step_recourse)
        D = np.zeros(mask.shape)
        for blk in d["blocks"]:
            t, s = int(blk["row"]), int(blk["col"])
            if not mask[t * m, s * n_xi]:
                raise ValueError(f"policy {d['id']}: block ({t}, {s}) violates causality")
            D[t * m : (t + 1) * m, s * n_xi : (s + 1) * n_xi] = np.asarray(blk["D"], dtype=float)
        ids.append(str(d["id"]))
        Ds.append(D)
        es.append(np.asarray(d["e"], dtype=float))
        masks.append(mask)
    return ids, AffinePolicy(tuple(Ds), tuple(es), tuple(masks))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    case_path: str | None = None
    case_sha256: str | None = None
    data_path: str | None = None
    data_sha256: str | None = None
    risk: dict[str, Any] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    settings: dict[str, Any] = field(default_factory=dict)
    tool_version: str = ""
    python: str = field(default_factory=platform.python_version)
    created: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    @classmethod
    def for_inputs(cls, case_path=None, data_path=None, **kw) -> "RunManifest":
        from . import __version__

        return cls(
            case_path=None if case_path is None else str(case_path),
            case_sha256=None if case_path is None else file_sha256(case_path),
            data_path=None if data_path is None else str(data_path),
            data_sha256=None if data_path is None else file_sha256(data_path),
            tool_version=__version__,
            **kw,
        )

    def fingerprint(self) -> str:
        """Hash of everything that determines results (timestamps excluded)."""
        doc = asdict(self)
        doc.pop("created")
        doc.pop("python")
        return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["fingerprint"] = self.fingerprint()
        return d


def write_json(path, doc: Mapping[str, Any]) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_records_csv(path, records: list[Mapping[str, Any]], columns: list[str]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in records:
            w.writerow({k: _csv_cell(r.get(k)) for k in columns})


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return "" if v is None else v


def read_records_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
