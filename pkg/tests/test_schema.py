import numpy as np
import pytest

from hierblue.errors import GenerationError, RankError, SchemaError
from hierblue.schema import (
    AGGREGATE,
    INDIVIDUAL,
    BucketSpace,
    ConstraintPolicy,
    ConstraintSet,
    InstanceSpec,
    QueryType,
    build_instance,
    census_bucket_space,
    census_query_types,
    factor_equality_rows,
    node_workload,
    parse_instance_spec,
    read_tree,
    split_constraints,
    write_tree,
)


def toy_queries(asym_card, per_level=None):
    per_level = per_level or {}
    return (
        QueryType("detailed", INDIVIDUAL, np.eye(asym_card), dict(per_level)),
        QueryType("total", AGGREGATE, np.ones((1, asym_card)), dict(per_level)),
    )


def toy_spec(**kwargs):
    defaults = dict(
        seed=42,
        level_arities=(3, 4),
        bucket_space=BucketSpace(asym_card=2, sym_card=3),
        query_types=toy_queries(2),
        constraint_policy=ConstraintPolicy(zero_rate=0.3, exact_total_levels=(0,)),
    )
    defaults.update(kwargs)
    return InstanceSpec(**defaults)


class TestBucketSpace:
    def test_census_preset_counts(self):
        bs = census_bucket_space()
        assert bs.asym_card == 32
        assert bs.sym_card == 63
        assert bs.size == 2016
        assert bs.asym_factors == (8, 2, 2)

    def test_bad_factors(self):
        with pytest.raises(SchemaError):
            BucketSpace(asym_card=4, sym_card=2, asym_factors=(3,))


class TestBuildInstance:
    def test_single_leaf_forced_truth(self):
        spec = toy_spec(
            level_arities=(1,),
            bucket_space=BucketSpace(asym_card=1, sym_card=1),
            query_types=toy_queries(1),
            constraint_policy=ConstraintPolicy(
                zero_rate=0.0, count_dist="constant", count_value=5
            ),
        )
        tree = build_instance(spec)
        assert len(tree.leaves()) == 1
        assert tree.leaves()[0].truth.tolist() == [5]
        assert tree.nodes["0"].truth.tolist() == [5]

    def test_census_preset_workload_size(self):
        spec = toy_spec(
            level_arities=(1,),
            bucket_space=census_bucket_space(),
            query_types=tuple(census_query_types()),
            constraint_policy=ConstraintPolicy(zero_rate=0.0, count_mean=3.0),
        )
        tree = build_instance(spec)
        assert tree.bucket_space.size == 2016
        workload = node_workload(tree, "0")
        materialized = workload.w1.shape[0] * 63 + workload.w2.shape[0]
        assert materialized == 2603
        # enumeration of the per-node query table by kind
        assert workload.w1.shape[0] * 63 == 2583
        assert workload.w2.shape[0] == 20

    def test_determinism(self):
        t1 = build_instance(toy_spec())
        t2 = build_instance(toy_spec())
        assert len(t1.leaves()) == 12
        for node_id in t1.sorted_ids():
            assert np.array_equal(t1.nodes[node_id].truth, t2.nodes[node_id].truth)

    def test_internal_truth_is_child_sum_and_constraints_hold(self):
        tree = build_instance(toy_spec(seed=5))
        tree.validate_truth()
        for node in tree.nodes.values():
            if node.children:
                total = sum(tree.nodes[c].truth for c in node.children)
                assert np.array_equal(total, node.truth)

    def test_zero_slices_become_equalities(self):
        tree = build_instance(toy_spec(seed=9, constraint_policy=ConstraintPolicy(zero_rate=0.9)))
        ba, d = tree.bucket_space.asym_card, tree.bucket_space.sym_card
        found = False
        for node in tree.nodes.values():
            x = node.truth.reshape(ba, d)
            zero_slices = np.nonzero(x.sum(axis=1) == 0)[0]
            assert node.constraints.r1.shape[0] == zero_slices.size
            found = found or zero_slices.size > 0
        assert found

    def test_slice_bounds_hold_on_truth_and_are_additive(self):
        policy = ConstraintPolicy(zero_rate=0.4, slice_lower_bounds=True, slice_upper_cap=10_000)
        tree = build_instance(toy_spec(seed=3, constraint_policy=policy))
        tree.validate_truth()

    def test_infeasible_cap_raises(self):
        policy = ConstraintPolicy(
            zero_rate=0.0, count_dist="constant", count_value=9, slice_upper_cap=1
        )
        with pytest.raises(GenerationError):
            build_instance(toy_spec(constraint_policy=policy))


class TestNodeWorkload:
    def test_detailed_only(self):
        spec = toy_spec(
            query_types=(QueryType("detailed", INDIVIDUAL, np.eye(2)),),
            constraint_policy=ConstraintPolicy(zero_rate=0.0),
        )
        tree = build_instance(spec)
        w = node_workload(tree, "0")
        assert np.allclose(w.w1, np.eye(2))
        assert w.w2.shape == (0, 2)

    def test_total_plus_detailed(self):
        tree = build_instance(toy_spec(constraint_policy=ConstraintPolicy(zero_rate=0.0)))
        w = node_workload(tree, "0")
        assert np.allclose(w.w1, np.eye(2))
        assert np.allclose(w.w2, np.ones((1, 2)))

    def test_materialization_has_full_column_rank(self):
        tree = build_instance(toy_spec(bucket_space=BucketSpace(asym_card=4, sym_card=3),
                                       query_types=toy_queries(4)))
        w = node_workload(tree, "0")
        dense = w.to_dense()
        assert np.linalg.matrix_rank(dense) == tree.bucket_space.size

    def test_rank_deficient_workload_raises(self):
        spec = toy_spec(
            query_types=(QueryType("total", AGGREGATE, np.ones((1, 2))),),
        )
        tree = build_instance(spec)
        with pytest.raises(RankError):
            node_workload(tree, "0")

    def test_variances_by_level(self):
        spec = toy_spec(query_types=toy_queries(2, per_level={0: 4.0, 1: 2.0}))
        tree = build_instance(spec)
        assert node_workload(tree, "0").var1.tolist() == [4.0, 4.0]
        assert node_workload(tree, "0/0").var1.tolist() == [2.0, 2.0]
        assert node_workload(tree, "0/0/0").var1.tolist() == [1.0, 1.0]  # default


class TestSplitConstraints:
    def test_root_total_constraint(self):
        tree = build_instance(toy_spec(constraint_policy=ConstraintPolicy(zero_rate=0.0)))
        cs = tree.nodes["0"].constraints
        r1, r2, v1, v2 = split_constraints(cs)
        assert r1.shape[0] == 0
        assert np.allclose(r2, np.ones((1, 2)))
        assert v2[0] == tree.nodes["0"].truth.sum()

    def test_zero_slice_row_expansion(self):
        cs = ConstraintSet(
            r1=np.array([[0.0, 1.0]]),
            rvals1=np.zeros(3),
            r2=np.zeros((0, 2)),
            rvals2=np.zeros(0),
            gineq=np.zeros((0, 6)),
            gval=np.zeros(0),
            sym_card=3,
        )
        req = cs.req
        assert req.shape == (3, 6)
        assert np.allclose(req, np.kron([[0.0, 1.0]], np.eye(3)))

    def test_empty(self):
        cs = ConstraintSet.empty(2, 3)
        r1, r2, v1, v2 = split_constraints(cs)
        assert r1.shape == (0, 2) and r2.shape == (0, 2)
        assert cs.req.shape == (0, 6)

    def test_reassembly_round_trip(self):
        tree = build_instance(toy_spec(seed=8))
        for node in tree.nodes.values():
            cs = node.constraints
            r1, r2, v1, v2 = factor_equality_rows(
                cs.req, cs.rval, tree.bucket_space.asym_card, tree.bucket_space.sym_card
            )
            assert r1.ndim == 2 and r2.ndim == 2
            rebuilt = ConstraintSet(
                r1=r1, rvals1=v1, r2=r2, rvals2=v2,
                gineq=cs.gineq, gval=cs.gval, sym_card=cs.sym_card,
            )
            assert np.array_equal(rebuilt.req, cs.req)
            assert np.array_equal(rebuilt.rval, cs.rval)

    def test_unstructured_row_raises(self):
        # one bucket pinned in a single symmetric slice only
        req = np.zeros((1, 6))
        req[0, 1] = 1.0
        with pytest.raises(SchemaError):
            factor_equality_rows(req, np.zeros(1), 2, 3)

    def test_rank_deficient_factors_raise(self):
        with pytest.raises(SchemaError):
            ConstraintSet(
                r1=np.vstack([np.ones(2), np.ones(2)]),
                rvals1=np.zeros(6),
                r2=np.zeros((0, 2)),
                rvals2=np.zeros(0),
                gineq=np.zeros((0, 6)),
                gval=np.zeros(0),
                sym_card=3,
            )


class TestSerialization:
    def test_round_trip(self, tmp_path):
        spec = toy_spec(seed=77, constraint_policy=ConstraintPolicy(
            zero_rate=0.3, slice_lower_bounds=True))
        tree = build_instance(spec)
        path = tmp_path / "tree.ndjson"
        write_tree(tree, path)
        back = read_tree(path, spec)
        assert back.sorted_ids() == tree.sorted_ids()
        for node_id in tree.sorted_ids():
            a, b = tree.nodes[node_id], back.nodes[node_id]
            assert np.array_equal(a.truth, b.truth)
            assert a.level == b.level
            assert a.children == b.children
            assert np.array_equal(a.constraints.req, b.constraints.req)
            assert np.array_equal(a.constraints.gineq, b.constraints.gineq)

    def test_deterministic_bytes(self, tmp_path):
        spec = toy_spec(seed=13)
        p1, p2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
        write_tree(build_instance(spec), p1)
        write_tree(build_instance(spec), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestSpecParsing:
    def test_toml_round_trip(self, tmp_path):
        text = """
seed = 42
level_arities = [2, 3]
passes = [["full"], ["total", "full"], ["full"]]

[bucket_space]
asym_card = 2
sym_card = 3

[[query_types]]
name = "detailed"
kind = "individual"
selector = "identity"
[query_types.noise_variance]
0 = 4.0
1 = 2.0

[[query_types]]
name = "total"
kind = "aggregate"
selector = "total"

[constraint_policy]
zero_rate = 0.25
exact_total_levels = [0, 1]
slice_lower_bounds = true
"""
        path = tmp_path / "toy.spec"
        path.write_text(text)
        from hierblue.schema import load_instance_spec

        spec = load_instance_spec(path)
        assert spec.seed == 42
        assert spec.level_arities == (2, 3)
        assert spec.query_types[0].noise_variance_by_level == {0: 4.0, 1: 2.0}
        assert spec.constraint_policy.exact_total_levels == (0, 1)
        assert spec.passes_per_level == (("full",), ("total", "full"), ("full",))
        tree = build_instance(spec)
        assert len(tree.nodes) == 1 + 2 + 6

    def test_missing_key_raises(self):
        with pytest.raises(SchemaError):
            parse_instance_spec({"seed": 1})
