import hashlib
import json
from fractions import Fraction

import pytest
from pydantic import ValidationError

from weightflow.errors import InputError, NotModular, ShapeMismatch
from weightflow.schemas import (
    DagDocument,
    LatticeDocument,
    Meta,
    QuiverDocument,
    TrajectoryHeader,
    WeightResult,
    dumps,
    element_name,
    load_result,
    read_input,
    structure_adapter,
)


def a2_document():
    return DagDocument.model_validate(
        {"vertices": [{"id": "src"}, {"id": "sink"}], "edges": [{"src": "src", "dst": "sink"}]}
    )


###
# inputs
###
def test_rationals_from_strings_and_numbers():
    doc = DagDocument.model_validate(
        {"vertices": [{"id": "a", "mass": "3/2", "theta": -1}, {"id": "b", "mass": 0.25}]}
    )
    assert doc.vertices[0].mass == Fraction(3, 2)
    assert doc.vertices[0].theta == -1
    assert doc.vertices[1].mass == Fraction(1, 4)


def test_bad_rational():
    with pytest.raises((ValidationError, InputError)):
        DagDocument.model_validate({"vertices": [{"id": "a", "mass": "one"}]})


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError):
        DagDocument.model_validate({"vertices": [{"id": "a", "weight": 1}]})


def test_dag_structure():
    L, X, Z = a2_document().structure()
    assert L.size == 3
    assert X.total(L) == 2
    assert Z.z(L, L.bottom, L.top).im == 0


def test_structure_adapter_picks_lattice():
    doc = structure_adapter.validate_python({"elements": ["0", "1"], "leq": [["0", "1"]]})
    assert isinstance(doc, LatticeDocument)
    L, X, Z = doc.structure()
    assert L.length == 1


def test_lattice_must_be_modular():
    doc = LatticeDocument.model_validate(
        {
            "elements": ["0", "a", "b", "c", "1"],
            "leq": [["0", "a"], ["a", "b"], ["b", "1"], ["0", "c"], ["c", "1"]],
        }
    )
    with pytest.raises(NotModular):
        doc.to_lattice()


def test_one_functional_only():
    with pytest.raises(ValidationError):
        LatticeDocument.model_validate(
            {"elements": ["0", "1"], "leq": [["0", "1"]], "class_weights": {"0": 1}, "class_z": {"0": [1, 0]}}
        )


def test_quiver_arrow_shape():
    doc = QuiverDocument.model_validate(
        {
            "vertices": [{"id": "a", "dim": 2}, {"id": "b"}],
            "arrows": [{"src": "a", "dst": "b", "matrix": [[["1", "0"]]]}],
        }
    )
    with pytest.raises(ShapeMismatch):
        doc.to_quadruple()


def test_quiver_quadruple():
    doc = QuiverDocument.model_validate(
        {
            "vertices": [{"id": "a", "dim": 2, "theta": 1}, {"id": "b", "theta": -2}],
            "arrows": [{"src": "a", "dst": "b", "matrix": [[["1", "0"], [0, 2]]]}],
        }
    )
    Q = doc.to_quadruple()
    assert Q.phi[0].shape == (1, 2)
    assert Q.phi[0][0, 1] == 2j


def test_quiver_filtration_unknown_vertex():
    doc = QuiverDocument.model_validate(
        {
            "vertices": [{"id": "a"}],
            "filtration": [{"exponents": ["0"], "blocks": {"z": [[["1", "0"]]]}}],
        }
    )
    with pytest.raises(InputError):
        doc.projectors(doc.to_quadruple())


###
# TrajectoryHeader
###
def test_header():
    assert TrajectoryHeader.parse("t,src:0,sink:0").columns == ["src:0", "sink:0"]


@pytest.mark.parametrize("line", ["time,a:0", "t,a", "t,a:0,a:0"])
def test_bad_header(line):
    with pytest.raises(InputError):
        TrajectoryHeader.parse(line)


###
# results
###
def _weight_result():
    return WeightResult(
        meta=Meta(kind="weight", sha256="0" * 64),
        input=a2_document(),
        chain=["{}", "{sink}", "{sink,src}"],
        labels=[Fraction(-1, 2), Fraction(1, 2)],
        lambda_mass=2.0000000000000004,
    )


def test_dumps_is_sorted_and_rounded():
    text = dumps(_weight_result())
    data = json.loads(text)
    assert list(data) == sorted(data)
    assert data["labels"] == ["-1/2", "1/2"]
    assert data["lambda_mass"] == 2.0
    assert text.endswith("\n")


def test_load_result():
    back = load_result(dumps(_weight_result()).encode())
    assert isinstance(back, WeightResult)
    assert back.labels == [Fraction(-1, 2), Fraction(1, 2)]


@pytest.mark.parametrize("raw", [b"{}", b"[]", b'{"meta": {"kind": "nope"}}'])
def test_load_result_rejects_other_documents(raw):
    with pytest.raises(InputError):
        load_result(raw)


def test_read_input(tmp_path):
    path = tmp_path / "in.json"
    path.write_bytes(b"{}")
    raw, digest = read_input(path)
    assert raw == b"{}"
    assert digest == hashlib.sha256(b"{}").hexdigest()


def test_element_names():
    assert element_name(frozenset({"b", "a"})) == "{a,b}"
    assert element_name(frozenset()) == "{}"
    assert element_name("x") == "x"
