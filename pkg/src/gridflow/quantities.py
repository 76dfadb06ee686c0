"""Unit-tagged physical observables and their canonical interchange format.

Every piece of data exchanged between computational services is a Dataset: a
named collection of observables, each carrying a unit from a fixed registry.
Datasets serialize to a line-oriented UTF-8 text format whose byte layout is
normative: content addressing (sha-256 of the canonical bytes) identifies
stored results, so serialization must be deterministic and the parser must
reject any non-canonical rendering.

Units are linear scalings of SI-coherent units over the 7 SI base dimensions.
Energy-per-mole carries an explicit amount exponent of -1 so per-particle and
per-mole energies can never be silently conflated.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field

from .errors import UserError

__all__ = [
    "Unit",
    "Observable",
    "Dataset",
    "ExtractionSpec",
    "QuantityError",
    "DimensionMismatch",
    "MissingObservable",
    "ParseError",
    "UnknownUnit",
    "get_unit",
    "registered_units",
    "convert",
    "project",
    "merge",
    "canonical_serialize",
    "canonical_deserialize",
    "dataset_id",
    "format_number",
]

# SI base dimension order used in every exponent vector.
DIMENSION_LABELS = ("length", "mass", "time", "current", "temperature", "amount", "luminosity")

KINDS = ("scalar", "vector3", "series", "table")

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*\Z")


class QuantityError(UserError):
    pass


class DimensionMismatch(QuantityError):
    pass


class MissingObservable(QuantityError):
    def __init__(self, name: str):
        super().__init__(f"observable not present: {name}")
        self.name = name


class UnknownUnit(QuantityError):
    pass


class ParseError(QuantityError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class Unit:
    """A named linear unit: `scale` converts one of it into SI-coherent terms."""

    name: str
    dimension: tuple[int, int, int, int, int, int, int]
    scale: float

    def __post_init__(self):
        if len(self.dimension) != 7:
            raise QuantityError(f"unit {self.name}: dimension vector must have 7 entries")
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise QuantityError(f"unit {self.name}: scale must be a positive finite real")

    def compatible(self, other: "Unit") -> bool:
        return self.dimension == other.dimension


def _dim(length=0, mass=0, time=0, current=0, temperature=0, amount=0, luminosity=0):
    return (length, mass, time, current, temperature, amount, luminosity)


_REGISTRY: dict[str, Unit] = {}
_ALIASES: dict[str, str] = {}


def _register(name: str, dimension, scale: float, *aliases: str) -> Unit:
    if name in _REGISTRY:
        raise QuantityError(f"duplicate unit name: {name}")
    unit = Unit(name, dimension, scale)
    _REGISTRY[name] = unit
    for alias in aliases:
        _ALIASES[alias] = name
    return unit


# Fixed registry covering the case study. Scales are exact definitions where
# one exists (Å, calorie, bar, eV per SI 2019, amu per CODATA 2018).
DIMENSIONLESS = _register("dimensionless", _dim(), 1.0, "1")

_register("m", _dim(length=1), 1.0)
_register("cm", _dim(length=1), 1e-2)
_register("nm", _dim(length=1), 1e-9)
_register("angstrom", _dim(length=1), 1e-10, "A", "Å")

_register("s", _dim(time=1), 1.0)
_register("ns", _dim(time=1), 1e-9)
_register("ps", _dim(time=1), 1e-12)
_register("fs", _dim(time=1), 1e-15)

_register("kg", _dim(mass=1), 1.0)
_register("g", _dim(mass=1), 1e-3)
_register("amu", _dim(mass=1), 1.66053906660e-27)

_register("K", _dim(temperature=1), 1.0)
_register("mol", _dim(amount=1), 1.0)

_register("J", _dim(length=2, mass=1, time=-2), 1.0)
_register("eV", _dim(length=2, mass=1, time=-2), 1.602176634e-19)

_register("J/mol", _dim(length=2, mass=1, time=-2, amount=-1), 1.0)
_register("kJ/mol", _dim(length=2, mass=1, time=-2, amount=-1), 1e3)
_register("kcal/mol", _dim(length=2, mass=1, time=-2, amount=-1), 4184.0)

_register("Pa", _dim(length=-1, mass=1, time=-2), 1.0)
_register("bar", _dim(length=-1, mass=1, time=-2), 1e5)
_register("atm", _dim(length=-1, mass=1, time=-2), 101325.0)

_register("m^2", _dim(length=2), 1.0)
_register("nm^2", _dim(length=2), 1e-18)
_register("angstrom^2", _dim(length=2), 1e-20, "Å²")

_register("m^2/s", _dim(length=2, time=-1), 1.0)
_register("cm^2/s", _dim(length=2, time=-1), 1e-4)
_register("angstrom^2/ps", _dim(length=2, time=-1), 1e-8, "Å²/ps")
_register("angstrom^2/fs", _dim(length=2, time=-1), 1e-5, "Å²/fs")


def get_unit(name: str) -> Unit:
    """Look a unit up by canonical name or accepted alias."""
    canonical = _ALIASES.get(name, name)
    try:
        return _REGISTRY[canonical]
    except KeyError:
        raise UnknownUnit(f"unknown unit: {name}") from None


def registered_units() -> tuple[Unit, ...]:
    return tuple(_REGISTRY.values())


def format_number(x: float) -> str:
    """17-significant-digit scientific notation; the only accepted rendering."""
    return f"{x:.16e}"


def _clean(x, context: str) -> float:
    value = float(x)
    if not math.isfinite(value):
        raise QuantityError(f"{context}: non-finite value {value!r}")
    # normalize -0.0 so equal datasets always serialize to identical bytes
    return value + 0.0 if value != 0.0 else 0.0


@dataclass(frozen=True)
class Observable:
    """One named physical quantity inside a Dataset.

    `values` is shaped per kind:
      scalar  -- (x,)
      vector3 -- (x, y, z)
      series  -- ((index, value), ...) with strictly increasing indices
      table   -- (row, ...) where each row is a tuple of len(columns) cells
    `columns` is used by tables only.
    """

    name: str
    kind: str
    unit: Unit
    values: tuple
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise QuantityError(f"invalid observable name: {self.name!r}")
        if self.kind not in KINDS:
            raise QuantityError(f"unknown observable kind: {self.kind!r}")
        check = getattr(self, f"_check_{self.kind}")
        check()

    def _check_scalar(self):
        if len(self.values) != 1:
            raise QuantityError(f"{self.name}: scalar requires exactly one value")

    def _check_vector3(self):
        if len(self.values) != 3:
            raise QuantityError(f"{self.name}: vector3 requires exactly three values")

    def _check_series(self):
        indices = [i for i, _ in self.values]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise QuantityError(f"{self.name}: series indices must strictly increase")

    def _check_table(self):
        if len(set(self.columns)) != len(self.columns):
            raise QuantityError(f"{self.name}: duplicate table columns")
        for col in self.columns:
            if not _NAME_RE.match(col):
                raise QuantityError(f"{self.name}: invalid column name {col!r}")
        for row in self.values:
            if len(row) != len(self.columns):
                raise QuantityError(f"{self.name}: row width != column count")

    @staticmethod
    def scalar(name: str, value: float, unit: Unit) -> "Observable":
        return Observable(name, "scalar", unit, (_clean(value, name),))

    @staticmethod
    def vector3(name: str, xyz, unit: Unit) -> "Observable":
        x, y, z = xyz
        return Observable(name, "vector3", unit, tuple(_clean(v, name) for v in (x, y, z)))

    @staticmethod
    def series(name: str, pairs, unit: Unit) -> "Observable":
        cleaned = tuple((_clean(i, name), _clean(v, name)) for i, v in pairs)
        return Observable(name, "series", unit, cleaned)

    @staticmethod
    def table(name: str, columns, rows, unit: Unit) -> "Observable":
        cleaned = tuple(tuple(_clean(c, name) for c in row) for row in rows)
        return Observable(name, "table", unit, cleaned, tuple(columns))

    @property
    def magnitude(self) -> float:
        """Value of a scalar observable."""
        if self.kind != "scalar":
            raise QuantityError(f"{self.name}: magnitude is only defined for scalars")
        return self.values[0]


@dataclass(frozen=True)
class ExtractionSpec:
    """The observables a consumer wants, each in the unit it wants them in."""

    wanted: tuple[tuple[str, Unit], ...]

    def __post_init__(self):
        names = [n for n, _ in self.wanted]
        if len(set(names)) != len(names):
            raise QuantityError("extraction spec repeats an observable name")

    @staticmethod
    def of(*pairs) -> "ExtractionSpec":
        return ExtractionSpec(tuple((n, u if isinstance(u, Unit) else get_unit(u)) for n, u in pairs))


@dataclass(frozen=True)
class Dataset:
    """An immutable set of observables plus ordered metadata.

    Observables are stored sorted by name, so structurally equal datasets
    compare equal regardless of construction order. Metadata order is
    significant (insertion order is preserved and serialized).
    """

    meta: tuple[tuple[str, str], ...] = ()
    observables: tuple[Observable, ...] = ()

    def __post_init__(self):
        names = [o.name for o in self.observables]
        if len(set(names)) != len(names):
            raise QuantityError("duplicate observable names in dataset")
        for key, value in self.meta:
            if not _NAME_RE.match(key):
                raise QuantityError(f"invalid meta key: {key!r}")
            if value == "" or "\n" in value:
                raise QuantityError(f"meta value for {key!r} must be non-empty, single line")

    @staticmethod
    def build(observables, meta=()) -> "Dataset":
        """Normalize construction: sort observables, accept dict-like meta."""
        if hasattr(meta, "items"):
            meta = tuple((str(k), str(v)) for k, v in meta.items())
        else:
            meta = tuple((str(k), str(v)) for k, v in meta)
        obs = tuple(sorted(observables, key=lambda o: o.name))
        return Dataset(meta, obs)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.observables)

    def get(self, name: str) -> Observable:
        for o in self.observables:
            if o.name == name:
                return o
        raise MissingObservable(name)

    def has(self, name: str) -> bool:
        return any(o.name == name for o in self.observables)

    def meta_dict(self) -> dict[str, str]:
        return dict(self.meta)

    @property
    def id(self) -> str:
        return dataset_id(self)


def convert(q: Observable, target: Unit) -> Observable:
    """Re-express an observable in a dimension-compatible unit.

    Series indices are positional, not physical, so only the value component
    is rescaled; table cells all carry the observable's unit and rescale.
    """
    if q.unit.dimension != target.dimension:
        raise DimensionMismatch(
            f"{q.name}: cannot convert {q.unit.name} to {target.name}: dimensions differ"
        )
    factor = q.unit.scale / target.scale
    if q.kind == "scalar":
        return Observable.scalar(q.name, q.values[0] * factor, target)
    if q.kind == "vector3":
        return Observable.vector3(q.name, tuple(v * factor for v in q.values), target)
    if q.kind == "series":
        return Observable.series(q.name, tuple((i, v * factor) for i, v in q.values), target)
    return Observable.table(
        q.name, q.columns, tuple(tuple(c * factor for c in row) for row in q.values), target
    )


def project(ds: Dataset, spec: ExtractionSpec) -> Dataset:
    """Extract exactly the requested observables, converted to requested units.

    The result records its origin under the meta key "derived-from".
    """
    picked = []
    for name, unit in spec.wanted:
        picked.append(convert(ds.get(name), unit))
    return Dataset.build(picked, meta={"derived-from": ds.id})


def merge(datasets, meta=None) -> Dataset:
    """Union of observables; a later dataset wins name clashes.

    Returns the merged dataset and is deterministic in input order. Clashes
    are reported to the optional `on_clash` callable via keyword use below.
    """
    return merge_with(datasets, meta=meta)[0]


def merge_with(datasets, meta=None):
    by_name: dict[str, Observable] = {}
    clashes: list[str] = []
    parents: list[str] = []
    for ds in datasets:
        parents.append(ds.id)
        for obs in ds.observables:
            if obs.name in by_name:
                clashes.append(obs.name)
            by_name[obs.name] = obs
    if meta is None:
        meta = {"derived-from": ",".join(parents)} if parents else {}
    return Dataset.build(by_name.values(), meta=meta), clashes


# ---------------------------------------------------------------------------
# canonical text format
#
#   dataset-v1
#   meta <key> <value>          (insertion order; value may contain spaces)
#   obs <name> <kind> <unit> <payload...>   (lexicographic by name)
#   end
#
# Payloads: scalar N; vector3 N N N; series COUNT (idx val)*; table ROWS COLS
# colname* cell* (row-major). All numbers in 17-significant-digit scientific
# notation. The parser accepts only this exact rendering: any other byte
# sequence is a ParseError, which is what makes single-byte corruption of a
# stored blob detectable by hash or by parse failure.
# ---------------------------------------------------------------------------

_HEADER = "dataset-v1"
_TRAILER = "end"


def canonical_serialize(ds: Dataset) -> bytes:
    lines = [_HEADER]
    for key, value in ds.meta:
        lines.append(f"meta {key} {value}")
    for obs in sorted(ds.observables, key=lambda o: o.name):
        lines.append("obs " + _obs_payload(obs))
    lines.append(_TRAILER)
    return ("\n".join(lines) + "\n").encode("utf-8")


def _obs_payload(obs: Observable) -> str:
    head = f"{obs.name} {obs.kind} {obs.unit.name}"
    if obs.kind == "scalar":
        return f"{head} {format_number(obs.values[0])}"
    if obs.kind == "vector3":
        return head + " " + " ".join(format_number(v) for v in obs.values)
    if obs.kind == "series":
        nums = [str(len(obs.values))]
        for i, v in obs.values:
            nums.append(format_number(i))
            nums.append(format_number(v))
        return head + " " + " ".join(nums)
    cells = [str(len(obs.values)), str(len(obs.columns))]
    cells.extend(obs.columns)
    for row in obs.values:
        cells.extend(format_number(c) for c in row)
    return head + " " + " ".join(cells)


def dataset_id(ds: Dataset) -> str:
    return hashlib.sha256(canonical_serialize(ds)).hexdigest()


class _Cursor:
    """Strict token reader over one canonical line."""

    def __init__(self, tokens: list[str], lineno: int):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno

    def take(self, what: str) -> str:
        if self.pos >= len(self.tokens):
            raise ParseError(self.lineno, f"expected {what}, line ended early")
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def take_number(self, what: str) -> float:
        token = self.take(what)
        try:
            value = float(token)
        except ValueError:
            raise ParseError(self.lineno, f"bad number for {what}: {token!r}") from None
        if not math.isfinite(value):
            raise ParseError(self.lineno, f"non-finite number for {what}: {token!r}")
        if format_number(value) != token:
            raise ParseError(self.lineno, f"non-canonical number rendering: {token!r}")
        return value

    def take_int(self, what: str) -> int:
        token = self.take(what)
        if not token.isdigit() or (token != "0" and token.startswith("0")):
            raise ParseError(self.lineno, f"bad count for {what}: {token!r}")
        return int(token)

    def done(self):
        if self.pos != len(self.tokens):
            raise ParseError(self.lineno, "trailing tokens on line")


def canonical_deserialize(data: bytes) -> Dataset:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(0, f"not valid UTF-8: {exc}") from None
    if not text.endswith("\n"):
        raise ParseError(0, "document must end with a newline")
    lines = text.split("\n")[:-1]
    if not lines or lines[0] != _HEADER:
        raise ParseError(1, f"missing {_HEADER!r} header")
    if lines[-1] != _TRAILER:
        raise ParseError(len(lines), f"missing {_TRAILER!r} trailer")

    meta: list[tuple[str, str]] = []
    observables: list[Observable] = []
    seen_obs = False
    for lineno, line in enumerate(lines[1:-1], start=2):
        if line != line.strip() or "  " in line.split(" ", 1)[0]:
            raise ParseError(lineno, "malformed spacing")
        if line.startswith("meta "):
            if seen_obs:
                raise ParseError(lineno, "meta line after obs lines")
            rest = line[len("meta "):]
            key, sep, value = rest.partition(" ")
            if not sep or not value:
                raise ParseError(lineno, "meta needs a key and a value")
            meta.append((key, value))
        elif line.startswith("obs "):
            seen_obs = True
            observables.append(_parse_obs(line[len("obs "):], lineno))
        else:
            raise ParseError(lineno, f"unknown record: {line.split(' ', 1)[0]!r}")

    names = [o.name for o in observables]
    if names != sorted(names):
        raise ParseError(0, "observables not in lexicographic order")
    try:
        return Dataset(tuple(meta), tuple(observables))
    except QuantityError as exc:
        raise ParseError(0, str(exc)) from None


def _parse_obs(payload: str, lineno: int) -> Observable:
    tokens = payload.split(" ")
    if "" in tokens:
        raise ParseError(lineno, "malformed spacing in obs line")
    cur = _Cursor(tokens, lineno)
    name = cur.take("observable name")
    kind = cur.take("kind")
    if kind not in KINDS:
        raise ParseError(lineno, f"unknown kind: {kind!r}")
    unit_name = cur.take("unit")
    if unit_name not in _REGISTRY:
        raise ParseError(lineno, f"unknown unit: {unit_name!r}")
    unit = _REGISTRY[unit_name]
    try:
        if kind == "scalar":
            obs = Observable.scalar(name, cur.take_number("value"), unit)
        elif kind == "vector3":
            obs = Observable.vector3(name, tuple(cur.take_number("component") for _ in range(3)), unit)
        elif kind == "series":
            count = cur.take_int("series length")
            pairs = [(cur.take_number("index"), cur.take_number("value")) for _ in range(count)]
            obs = Observable.series(name, pairs, unit)
        else:
            rows = cur.take_int("row count")
            cols = cur.take_int("column count")
            columns = [cur.take("column name") for _ in range(cols)]
            data = [tuple(cur.take_number("cell") for _ in range(cols)) for _ in range(rows)]
            obs = Observable.table(name, columns, data, unit)
    except QuantityError as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(lineno, str(exc)) from None
    cur.done()
    return obs
