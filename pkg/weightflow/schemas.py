"""JSON documents read and written by the command line."""

import hashlib
import json
import math
import re
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    TypeAdapter,
    WithJsonSchema,
    model_validator,
)

from . import __version__
from .errors import InputError, NotModular, ShapeMismatch
from .exact import Gaussian, format_fraction, to_fraction

COLUMN = re.compile(r"^[^,]+:\d+$")


def _rational(value):
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return to_fraction(value)
    if isinstance(value, (str, Fraction)):
        return to_fraction(value)
    raise ValueError("expected a rational as a 'p/q' string")


Rational = Annotated[
    Fraction,
    BeforeValidator(_rational),
    PlainSerializer(format_fraction, return_type=str),
    WithJsonSchema({"type": "string", "pattern": r"^-?\d+(/\d+)?$|^-?\d*\.\d+$"}),
]


def _decimal(value) -> str:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return repr(float(value))
    if not isinstance(value, str):
        raise ValueError("expected a decimal string")
    float(value)
    return value


Decimal = Annotated[str, BeforeValidator(_decimal)]
Entry = Tuple[Decimal, Decimal]


class Document(BaseModel):
    model_config = ConfigDict(extra="forbid")


def element_name(label) -> str:
    if isinstance(label, frozenset):
        return "{" + ",".join(sorted(str(v) for v in label)) + "}"
    return str(label)


###
# inputs
###


class DagVertex(Document):
    id: str
    mass: Rational = Fraction(1)
    theta: Rational = Fraction(0)


class DagEdge(Document):
    src: str
    dst: str
    c: Rational = Fraction(1)


class DagDocument(Document):
    vertices: List[DagVertex]
    edges: List[DagEdge] = []

    def to_dag(self):
        from .dag import Dag

        return Dag.from_edges(
            [v.id for v in self.vertices],
            [(e.src, e.dst) for e in self.edges],
            [v.mass for v in self.vertices],
            [e.c for e in self.edges],
        )

    @property
    def theta(self) -> Tuple[Fraction, ...]:
        return tuple(v.theta for v in self.vertices)

    def to_quadruple(self):
        from .flow import Quadruple

        return Quadruple.thin(self.to_dag(), theta=self.theta)

    def structure(self):
        """Closed-subgraph lattice with X = m, and its polarization Z = m + i theta."""
        from .hn import Polarization
        from .lattice import subgraph_lattice

        G = self.to_dag()
        L, X = subgraph_lattice(G)
        xi = X.charges(L)
        charges = [
            Gaussian(xi[k], sum((self.theta[i] for i in range(G.n) if mask >> i & 1), Fraction(0)))
            for k, mask in enumerate(L._cache["masks"])
        ]
        return L, X, Polarization.from_charges(L, charges)


class LatticeDocument(Document):
    elements: List[str]
    leq: List[Tuple[str, str]] = []
    class_weights: Optional[Dict[str, Rational]] = None
    class_z: Optional[Dict[str, Tuple[Rational, Rational]]] = None

    @model_validator(mode="after")
    def _one_functional(self):
        if self.class_weights is not None and self.class_z is not None:
            raise ValueError("give class_weights or class_z, not both")
        return self

    def to_lattice(self):
        from .lattice import build_lattice, check_modular

        L = build_lattice(self.elements, self.leq)
        bad = check_modular(L)
        if bad is not None:
            a, b, x = (L.label(k) for k in bad)
            raise NotModular("modular law fails for a={}, b={}, x={}".format(a, b, x))
        return L

    def structure(self):
        from .hn import Polarization
        from .lattice import XFunctional

        L = self.to_lattice()
        if self.class_weights is not None:
            X = XFunctional({int(k): v for k, v in self.class_weights.items()})
        else:
            X = XFunctional.length(L)
        if self.class_z is not None:
            Z = Polarization({int(k): Gaussian(*v) for k, v in self.class_z.items()})
        else:
            Z = Polarization.from_x(L, X)
        return L, X, Z


StructureDocument = Union[LatticeDocument, DagDocument]
structure_adapter = TypeAdapter(StructureDocument)


class QuiverVertex(Document):
    id: str
    dim: int = Field(1, ge=0)
    mass: Rational = Fraction(1)
    theta: Rational = Fraction(0)


class QuiverArrow(Document):
    src: str
    dst: str
    matrix: List[List[Entry]]


class FiltrationPiece(Document):
    """One projector of a supplied filtration, as a matrix per vertex."""

    exponents: List[Rational]
    blocks: Dict[str, List[List[Entry]]]


def _complex_matrix(rows: List[List[Entry]], shape: Tuple[int, int], what: str) -> np.ndarray:
    r, c = shape
    if len(rows) != r or any(len(row) != c for row in rows):
        raise ShapeMismatch("{} must be {} x {}".format(what, r, c))
    out = np.zeros(shape, dtype=complex)
    for i, row in enumerate(rows):
        for j, (re_part, im_part) in enumerate(row):
            out[i, j] = complex(float(re_part), float(im_part))
    return out


class QuiverDocument(Document):
    vertices: List[QuiverVertex]
    arrows: List[QuiverArrow] = []
    filtration: Optional[List[FiltrationPiece]] = None

    def to_quadruple(self):
        from .flow import Quadruple

        dims = {v.id: v.dim for v in self.vertices}
        arrows = []
        for a in self.arrows:
            if a.src not in dims or a.dst not in dims:
                raise InputError("arrow {} -> {} refers to an unknown vertex".format(a.src, a.dst))
            shape = (dims[a.dst], dims[a.src])
            arrows.append((a.src, a.dst, _complex_matrix(a.matrix, shape, "arrow {} -> {}".format(a.src, a.dst))))
        return Quadruple.from_quiver([(v.id, v.dim, v.mass, v.theta) for v in self.vertices], arrows)

    def projectors(self, Q):
        from .staralg import GradedProjectors

        if self.filtration is None:
            return None
        A = Q.algebra
        labels, projectors = [], []
        for piece in self.filtration:
            unknown = set(piece.blocks) - set(A.vertices)
            if unknown:
                raise InputError("filtration refers to unknown vertices {}".format(sorted(unknown)))
            blocks = []
            for v, d in zip(A.vertices, A.dims):
                rows = piece.blocks.get(v)
                blocks.append(np.zeros((d, d), dtype=complex) if rows is None else _complex_matrix(rows, (d, d), "projector block " + v))
            labels.append(tuple(piece.exponents))
            projectors.append(tuple(blocks))
        return GradedProjectors(A, tuple(labels), tuple(projectors))


FlowDocument = Union[QuiverDocument, DagDocument]
flow_adapter = TypeAdapter(FlowDocument)


class TrajectoryHeader(BaseModel):
    columns: List[Annotated[str, Field(pattern=COLUMN.pattern)]]

    @model_validator(mode="after")
    def _unique(self):
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("trajectory columns must be unique")
        return self

    @classmethod
    def parse(cls, line: str) -> "TrajectoryHeader":
        names = [x.strip() for x in line.split(",")]
        if not names or names[0] != "t":
            raise InputError("a trajectory header starts with the column t")
        from pydantic import ValidationError

        try:
            return cls(columns=names[1:])
        except ValidationError as e:
            raise InputError("bad trajectory header: {}".format(e)) from e


###
# results
###


Kind = Literal["grading", "hn", "weight", "iterate", "simulate", "asymptotic", "fit"]


class Meta(Document):
    kind: Kind
    version: str = __version__
    sha256: str
    options: Dict[str, Any] = {}


class CertificateEdge(Document):
    src: str
    dst: str
    u: Rational


class GradingResult(Document):
    meta: Meta
    input: DagDocument
    grading: Dict[str, Rational]
    certificate: List[CertificateEdge]
    strict: Optional[List[CertificateEdge]] = None
    energy: Rational


class HNResult(Document):
    meta: Meta
    input: StructureDocument
    chain: List[str]
    z: List[Tuple[Rational, Rational]]
    phases: List[float]
    mass: float
    mass_exact: str
    semistable: bool


class WeightResult(Document):
    meta: Meta
    input: StructureDocument
    chain: List[str]
    labels: List[Rational]
    lambda_mass: float


class LevelReport(Document):
    chain: List[str]
    labels: List[Rational]
    elements: int
    length: int


class IterateResult(Document):
    meta: Meta
    input: StructureDocument
    depth: int
    chain: List[str]
    labels: List[List[Rational]]
    levels: List[LevelReport]


class SimulateResult(Document):
    meta: Meta
    input: FlowDocument
    trajectory: str
    trajectory_sha256: Optional[str] = None
    t_span: Tuple[float, float]
    samples: int
    energy_first: Optional[float] = None
    energy_last: Optional[float] = None


class Term(Document):
    exponents: List[Rational]
    projector_rank: int
    vertices: List[str]


class ResidualReport(Document):
    t_span: Tuple[float, float]
    exact: bool
    exponent: Optional[float] = None
    log_exponent: Optional[float] = None
    integrable: bool
    tail: Optional[float] = None


class AsymptoticResult(Document):
    meta: Meta
    input: FlowDocument
    depth: int
    terms: List[Term]
    h: Dict[str, List[List[str]]]
    leading: Dict[str, List[List[str]]]
    threshold: Optional[float] = None
    residual: Optional[ResidualReport] = None


class Branch(Document):
    column: str
    exponents: List[float]
    errors: Optional[List[float]] = None
    intercept: float


class FitResult(Document):
    meta: Meta
    trajectory: Optional[str] = None
    depth: int
    window: Tuple[float, float]
    inverse_log: bool
    condition: float
    samples: int
    branches: List[Branch]


RESULTS = {
    "grading": GradingResult,
    "hn": HNResult,
    "weight": WeightResult,
    "iterate": IterateResult,
    "simulate": SimulateResult,
    "asymptotic": AsymptoticResult,
    "fit": FitResult,
}


###
# io
###


def read_input(path) -> Tuple[bytes, str]:
    raw = Path(path).read_bytes()
    return raw, hashlib.sha256(raw).hexdigest()


def _round(value):
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float("{:.12g}".format(value))
    if isinstance(value, dict):
        return {k: _round(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_round(v) for v in value]
    return value


def dumps(model: BaseModel) -> str:
    """Sorted keys, two-space indent, floats at 12 significant digits."""
    return json.dumps(_round(model.model_dump(mode="json")), sort_keys=True, indent=2) + "\n"


def load_result(raw: bytes) -> BaseModel:
    data = json.loads(raw)
    kind = data.get("meta", {}).get("kind") if isinstance(data, dict) else None
    if kind not in RESULTS:
        raise InputError("not a weightflow result document (kind {!r})".format(kind))
    return RESULTS[kind].model_validate(data)
