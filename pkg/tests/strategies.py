from fractions import Fraction

from hypothesis import strategies as st

from weightflow.dag import Dag


@st.composite
def dags(draw, max_vertices=5, unit_masses=False):
    """Random DAGs whose edges run from lower to higher vertex numbers."""
    n = draw(st.integers(1, max_vertices))
    vertices = ["v{}".format(i) for i in range(n)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    chosen = draw(st.lists(st.sampled_from(pairs), unique=True)) if pairs else []
    if unit_masses:
        masses = [Fraction(1)] * n
    else:
        masses = draw(
            st.lists(
                st.fractions(min_value=Fraction(1, 4), max_value=4, max_denominator=6),
                min_size=n,
                max_size=n,
            )
        )
    return Dag.from_edges(vertices, [(vertices[i], vertices[j]) for i, j in sorted(chosen)], masses)


def a4(masses=(1, 1, 1, 1), constants=None):
    """Zig-zag 1 -> 2 <- 3 -> 4."""
    return Dag.from_edges(["1", "2", "3", "4"], [("1", "2"), ("3", "2"), ("3", "4")], masses, constants)
