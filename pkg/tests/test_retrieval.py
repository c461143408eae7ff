import numpy as np
import pytest

from conftest import make_manifest
from edgeleak.dataset import ImageRecord, Manifest
from edgeleak.retrieval import (
    CSV_HEADER,
    EmbeddingDatabase,
    evaluate_protocol,
    load_embeddings,
    manifest_ref_counts,
    normalize_rows,
    query,
    random_baseline,
    save_embeddings,
    select_references,
)
from oracles import hypergeom_topk_ref, topk_ref


def make_db(matrix, image_ids=None, person_ids=None):
    n = matrix.shape[0]
    image_ids = image_ids or [f"img{i:04d}" for i in range(n)]
    person_ids = person_ids or [f"p{i:04d}" for i in range(n)]
    return EmbeddingDatabase(matrix=normalize_rows(matrix),
                             image_ids=tuple(image_ids), person_ids=tuple(person_ids))


class TestEmbeddingDatabase:
    def test_rows_must_be_unit(self, rng):
        m = rng.normal(size=(4, 8)).astype(np.float32)
        with pytest.raises(ValueError, match="unit-norm"):
            EmbeddingDatabase(matrix=m, image_ids=tuple("abcd"), person_ids=tuple("abcd"))

    def test_norm_contract_after_build(self, rng):
        db = make_db(rng.normal(size=(10, 6)))
        norms = np.linalg.norm(db.matrix.astype(np.float64), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_immutable(self, rng):
        db = make_db(rng.normal(size=(3, 4)))
        with pytest.raises(ValueError):
            db.matrix[0, 0] = 5.0

    def test_duplicate_inputs_give_identical_rows(self, rng):
        row = rng.normal(size=4)
        db = make_db(np.stack([row, row]), image_ids=["a", "b"], person_ids=["p", "p"])
        np.testing.assert_array_equal(db.matrix[0], db.matrix[1])

    def test_zero_row_rejected(self):
        m = np.zeros((2, 4))
        m[0, 0] = 1.0
        with pytest.raises(ValueError, match="zero embedding"):
            normalize_rows(m)


class TestQuery:
    def test_exact_match(self):
        db = make_db(np.array([[1.0, 0.0], [0.0, 1.0]]))
        out = query(db, np.array([1.0, 0.0]), k=1)
        assert out[0][0] == "img0000"
        assert out[0][2] == pytest.approx(1.0)

    def test_tie_broken_by_image_id(self):
        db = make_db(np.array([[1.0, 0.0], [1.0, 0.0]]), image_ids=["zz", "aa"],
                     person_ids=["p1", "p2"])
        out = query(db, np.array([1.0, 0.0]), k=2)
        assert [o[0] for o in out] == ["aa", "zz"]

    def test_k_exceeding_size_flagged(self, rng):
        db = make_db(rng.normal(size=(3, 4)))
        with pytest.warns(UserWarning, match="exceeds"):
            out = query(db, rng.normal(size=4), k=10)
        assert len(out) == 3

    def test_zero_query_rejected(self, rng):
        db = make_db(rng.normal(size=(3, 4)))
        with pytest.raises(ValueError, match="zero vector"):
            query(db, np.zeros(4), k=1)

    def test_matches_full_sort_oracle(self, rng):
        for trial in range(50):
            n = int(rng.integers(2, 200))
            d = int(rng.integers(2, 33))
            m = rng.normal(size=(n, d))
            if trial % 3 == 0 and n >= 4:  # force exact ties via duplicated rows
                m[1] = m[0]
                m[3] = m[2]
            ids = [f"im{int(x):05d}" for x in rng.permutation(n)]
            pids = [f"p{int(rng.integers(0, max(2, n // 3))):04d}" for _ in range(n)]
            db = make_db(m, image_ids=ids, person_ids=pids)
            q = rng.normal(size=d)
            k = int(rng.integers(1, n + 1))
            got = query(db, q, k)
            want = topk_ref(db.matrix, ids, pids, q, k)
            assert [g[0] for g in got] == [w[0] for w in want]

    def test_scale_invariant_ranking(self, rng):
        db = make_db(rng.normal(size=(20, 8)))
        q = rng.normal(size=8)
        a = [x[0] for x in query(db, q, 10)]
        b = [x[0] for x in query(db, q * 1234.5, 10)]
        assert a == b


class TestSelectReferences:
    def _manifest(self, counts):
        records = []
        for p, c in enumerate(counts):
            pid = f"p{p:03d}"
            for i in range(c):
                records.append(ImageRecord(f"{pid}_{i:02d}o", pid, "original",
                                           "/x.png", split="test"))
            records.append(ImageRecord(
                f"{pid}_q", pid, "augmented", "/x.png",
                base_image_id=None, conditioning={"segmentation"}, split="test"))
        return Manifest(records=records)

    def test_full_ref_takes_all_originals(self):
        m = self._manifest([3, 2, 4])
        refs = select_references(m, "full_ref")
        assert len(refs) == 9
        assert all(r.variant == "original" for r in refs)

    def test_single_ref_one_per_person(self):
        m = self._manifest([3, 2, 4])
        refs = select_references(m, "single_ref", seed=5)
        assert len(refs) == 3
        assert len({r.person_id for r in refs}) == 3

    def test_single_ref_keyed_draw_is_stable(self):
        m = self._manifest([5, 5, 5])
        a = [r.image_id for r in select_references(m, "single_ref", seed=5)]
        b = [r.image_id for r in select_references(m, "single_ref", seed=5)]
        c = [r.image_id for r in select_references(m, "single_ref", seed=6)]
        assert a == b
        assert a != c

    def test_few_ref_min_rule(self):
        m = self._manifest([7, 3, 1])
        refs = select_references(m, "few_ref", seed=0)
        per = {}
        for r in refs:
            per[r.person_id] = per.get(r.person_id, 0) + 1
        assert sorted(per.values(), reverse=True) == [5, 3, 1]

    def test_person_without_originals_warned_and_excluded(self):
        m = self._manifest([2])
        extra = ImageRecord("lone_q", "lonely", "augmented", "/x.png",
                            conditioning={"segmentation"}, split="test")
        m = Manifest(records=m.records + [extra])
        with pytest.warns(UserWarning, match="excluded"):
            refs = select_references(m, "single_ref")
        assert all(r.person_id != "lonely" for r in refs)

    def test_empty_split_is_error(self):
        m = self._manifest([2])
        with pytest.raises(ValueError, match="no original records"):
            select_references(m, "full_ref", split="val")


def fake_queries(person_ids, embeddings):
    out = []
    for i, (pid, e) in enumerate(zip(person_ids, embeddings)):
        rec = ImageRecord(f"q{i:04d}", pid, "augmented", "/x.png",
                          conditioning={"segmentation"}, split="test")
        out.append((rec, e))
    return out


class TestEvaluateProtocol:
    def test_oracle_embeddings_are_perfect(self):
        # one-hot per person: query equals its person's reference row
        eye = np.eye(8)
        db = make_db(eye, person_ids=[f"p{i}" for i in range(8)])
        queries = fake_queries([f"p{i}" for i in range(8)], list(eye))
        rep = evaluate_protocol(db, queries, ks=[1, 3, 5])
        assert all(v == 1.0 for v in rep.topk_accuracy.values())

    def test_adversarial_embeddings_are_zero_at_k1(self):
        eye = np.eye(4)
        db = make_db(eye, person_ids=[f"p{i}" for i in range(4)])
        shifted = [eye[(i + 1) % 4] for i in range(4)]
        rep = evaluate_protocol(db, fake_queries([f"p{i}" for i in range(4)], shifted), ks=[1])
        assert rep.topk_accuracy[1] == 0.0

    def test_random_embeddings_near_analytic_baseline(self, rng):
        n = 100
        db = make_db(rng.normal(size=(n, 16)), person_ids=[f"p{i:03d}" for i in range(n)])
        n_q = 2000
        pids = [f"p{int(rng.integers(n)):03d}" for _ in range(n_q)]
        queries = fake_queries(pids, list(rng.normal(size=(n_q, 16))))
        rep = evaluate_protocol(db, queries, ks=[1])
        base = 1.0 / n
        se = np.sqrt(base * (1 - base) / n_q)
        assert abs(rep.topk_accuracy[1] - base) < 3 * se

    def test_topk_monotone_in_k(self, rng):
        db = make_db(rng.normal(size=(40, 8)),
                     person_ids=[f"p{i % 13:02d}" for i in range(40)])
        queries = fake_queries([f"p{int(rng.integers(13)):02d}" for _ in range(60)],
                               list(rng.normal(size=(60, 8))))
        rep = evaluate_protocol(db, queries, ks=[1, 2, 5, 10, 40])
        accs = [rep.topk_accuracy[k] for k in sorted(rep.topk_accuracy)]
        assert all(a <= b + 1e-12 for a, b in zip(accs, accs[1:]))
        assert all(0.0 <= a <= 1.0 for a in accs)

    def test_permutation_invariance(self, rng):
        n = 30
        m = rng.normal(size=(n, 6))
        m[5] = m[4]  # exact tie rows
        ids = [f"im{i:03d}" for i in range(n)]
        pids = [f"p{i % 7}" for i in range(n)]
        queries = fake_queries([f"p{int(rng.integers(7))}" for _ in range(25)],
                               list(rng.normal(size=(25, 6))))
        rep1 = evaluate_protocol(make_db(m, ids, pids), queries, ks=[1, 3])
        perm = rng.permutation(n)
        rep2 = evaluate_protocol(
            make_db(m[perm], [ids[i] for i in perm], [pids[i] for i in perm]),
            queries, ks=[1, 3])
        assert rep1.topk_accuracy == rep2.topk_accuracy

    def test_empty_queries_error(self, rng):
        db = make_db(rng.normal(size=(3, 4)))
        with pytest.raises(ValueError, match="no queries"):
            evaluate_protocol(db, [], ks=[1])

    def test_missing_person_precondition(self, rng):
        db = make_db(rng.normal(size=(3, 4)), person_ids=["a", "b", "c"])
        queries = fake_queries(["zz"], [rng.normal(size=4)])
        with pytest.raises(ValueError, match="absent"):
            evaluate_protocol(db, queries, ks=[1])


class TestRandomBaseline:
    def test_single_ref_values(self):
        assert random_baseline("single_ref", 1, n_persons=3421) == pytest.approx(
            1 / 3421, abs=1e-12)
        assert 1 / 3421 == pytest.approx(0.0003, abs=1e-5)  # "approximately 0.03%"
        assert random_baseline("single_ref", 3421, n_persons=3421) == 1.0
        assert random_baseline("single_ref", 5000, n_persons=3421) == 1.0

    def test_full_ref_uniform_counts(self):
        assert random_baseline("full_ref", 1, ref_counts=[5] * 20) == pytest.approx(0.05)

    def test_hypergeometric_tail_vs_monte_carlo(self, rng):
        total, m, k = 60, 7, 5
        counts = [m] + [1] * (total - m)  # person 0 owns m refs
        got = random_baseline("full_ref", k, ref_counts=counts, query_weights=[1] + [0] * (total - m))
        ref = hypergeom_topk_ref(total, m, k, trials=40000, rng=rng)
        assert got == pytest.approx(ref, abs=0.01)

    def test_k_larger_than_dbit_saturates(self):
        assert random_baseline("few_ref", 100, ref_counts=[2, 3]) == 1.0

    def test_manifest_ref_counts(self):
        records = []
        for p, c in enumerate([7, 3, 1]):
            for i in range(c):
                records.append(ImageRecord(f"p{p}_{i}", f"p{p}", "original",
                                           "/x.png", split="test"))
        counts = manifest_ref_counts(Manifest(records=records), "few_ref")
        assert sorted(counts, reverse=True) == [5, 3, 1]


class TestEmbeddingFile:
    def test_roundtrip(self, tmp_path, rng):
        db = make_db(rng.normal(size=(12, 7)), person_ids=[f"p{i % 5}" for i in range(12)])
        path = tmp_path / "emb.bin"
        save_embeddings(path, db, checkpoint_hash="cafe1234")
        back, header = load_embeddings(path)
        np.testing.assert_array_equal(back.matrix, db.matrix)
        assert back.image_ids == db.image_ids
        assert back.person_ids == db.person_ids
        assert header["checkpoint_hash"] == "cafe1234"
        assert header["n"] == 12 and header["d"] == 7

    def test_header_is_json_line(self, tmp_path, rng):
        import json
        db = make_db(rng.normal(size=(3, 4)))
        path = tmp_path / "emb.bin"
        save_embeddings(path, db)
        with open(path, "rb") as fh:
            header = json.loads(fh.readline())
            payload = fh.read()
        assert header["n"] == 3
        assert len(payload) == 3 * 4 * 4

    def test_report_csv_shape(self, rng):
        db = make_db(rng.normal(size=(6, 4)), person_ids=[f"p{i % 3}" for i in range(6)])
        queries = fake_queries([f"p{i % 3}" for i in range(9)], list(rng.normal(size=(9, 4))))
        rep = evaluate_protocol(db, queries, ks=[1, 10, 100], protocol="single_ref")
        rows = rep.csv_rows()
        assert len(rows) == 3
        assert CSV_HEADER.startswith("protocol,k,accuracy")
        assert all(r.startswith("single_ref,") for r in rows)
