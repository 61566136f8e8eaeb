import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuropathx import genio
from neuropathx import pathway_features as pf

from oracles import brute_pathway_scores, random_instance, seeded


def _geno(dosages, snps, ids=None):
    dosages = np.array(dosages, dtype=float)
    ids = ids or [f"s{i}" for i in range(dosages.shape[0])]
    return genio.GenotypeTable(ids, list(snps), dosages)


def _gwas(snps, betas):
    return [genio.GwasRecord(s.snp_id, s.chrom, s.pos, b) for s, b in zip(snps, betas)]


def _pipeline(snps, genes, pathways, betas, dosages, window_kb, report=None):
    geno = _geno(dosages, snps)
    gwas = [genio.GwasRecord(s.snp_id, s.chrom, s.pos, betas[s.snp_id]) for s in snps if s.snp_id in betas]
    smap = pf.build_snp_gene_map(snps, genes, window_kb)
    means = pf.impute_means(geno)
    gs = pf.gene_scores(geno, gwas, smap, means, report)
    gp = pf.build_gene_pathway_map(pathways, gs.gene_symbols, report)
    return pf.pathway_scores(gs, gp), means


GENE = genio.GeneRecord("G1", "1", 500, 1500)


class TestSnpGeneMap:
    def test_window_reaches_51400(self):
        smap = pf.build_snp_gene_map([genio.SnpRecord("a", "1", 51400)], [GENE], 50)
        assert smap.members[0].tolist() == [0]

    def test_just_outside_window(self):
        smap = pf.build_snp_gene_map([genio.SnpRecord("a", "1", 51501)], [GENE], 50)
        assert smap.members[0].tolist() == []

    def test_chromosome_mismatch(self):
        smap = pf.build_snp_gene_map([genio.SnpRecord("a", "2", 1000)], [GENE], 50)
        assert smap.members[0].tolist() == []

    @pytest.mark.parametrize("pos,inside", [(499, False), (500, True), (1500, True), (1501, False)])
    def test_zero_window_inclusive(self, pos, inside):
        smap = pf.build_snp_gene_map([genio.SnpRecord("a", "1", pos)], [GENE], 0)
        assert (smap.members[0].tolist() == [0]) is inside

    def test_snp_in_two_genes(self):
        genes = [GENE, genio.GeneRecord("G2", "1", 2000, 3000)]
        smap = pf.build_snp_gene_map([genio.SnpRecord("a", "1", 1700)], genes, 1)
        assert [m.tolist() for m in smap.members] == [[0], [0]]

    def test_negative_window_rejected(self):
        with pytest.raises(ValueError):
            pf.build_snp_gene_map([], [GENE], -1)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(0, 60), st.integers(0, 60))
    def test_monotone_window(self, seed, w1, w2):
        w1, w2 = min(w1, w2), max(w1, w2)
        snps, genes, *_ = random_instance(seeded(seed))
        small = pf.build_snp_gene_map(snps, genes, w1)
        large = pf.build_snp_gene_map(snps, genes, w2)
        for a, b in zip(small.members, large.members):
            assert set(a.tolist()) <= set(b.tolist())


SNPS2 = [genio.SnpRecord("j1", "1", 600), genio.SnpRecord("j2", "1", 700)]


class TestGeneScores:
    def test_weighted_sum(self):
        geno = _geno([[2, 1]], SNPS2)
        smap = pf.build_snp_gene_map(SNPS2, [GENE], 50)
        gs = pf.gene_scores(geno, _gwas(SNPS2, [0.5, -0.2]), smap, np.zeros(2))
        assert gs.scores[0, 0] == pytest.approx(0.8, abs=1e-15)

    def test_zero_betas(self):
        geno = _geno([[2, 1], [0, 2]], SNPS2)
        smap = pf.build_snp_gene_map(SNPS2, [GENE], 50)
        gs = pf.gene_scores(geno, _gwas(SNPS2, [0.0, 0.0]), smap, np.zeros(2))
        assert np.all(gs.scores == 0.0)

    def test_imputed_missing(self):
        snps = SNPS2[:1]
        geno = _geno([[np.nan]], snps)
        smap = pf.build_snp_gene_map(snps, [GENE], 50)
        gs = pf.gene_scores(geno, _gwas(snps, [0.3]), smap, np.array([1.0]))
        assert gs.scores[0, 0] == pytest.approx(0.3, abs=1e-15)

    def test_snp_without_beta_is_ignored(self):
        geno = _geno([[2, 1]], SNPS2)
        smap = pf.build_snp_gene_map(SNPS2, [GENE], 50)
        gs = pf.gene_scores(geno, _gwas(SNPS2[:1], [0.5]), smap, np.zeros(2))
        assert gs.scores[0, 0] == 1.0

    def test_gene_without_snps_is_reported(self):
        far = genio.GeneRecord("FAR", "1", 10_000_000, 10_001_000)
        geno = _geno([[2, 1]], SNPS2)
        smap = pf.build_snp_gene_map(SNPS2, [GENE, far], 50)
        report = pf.DropReport()
        gs = pf.gene_scores(geno, _gwas(SNPS2, [1.0, 1.0]), smap, np.zeros(2), report)
        assert gs.gene_symbols == ["G1"]
        assert report.genes == [{"gene": "FAR", "reason": "no SNP within window"}]

    def test_impute_means_use_training_rows_only(self):
        geno = _geno([[0.0], [2.0], [np.nan]], SNPS2[:1])
        assert pf.impute_means(geno, [0]).tolist() == [0.0]
        assert pf.impute_means(geno, [0, 1]).tolist() == [1.0]
        assert pf.impute_means(geno, [2]).tolist() == [0.0]


class TestPathwayScores:
    def _genes(self, values, symbols=("g1", "g2")):
        return pf.GeneScores(["s1"], list(symbols), np.array([values], dtype=float))

    def test_sum(self):
        gp = pf.build_gene_pathway_map([genio.PathwayDef("P", "", ("g1", "g2"))], ["g1", "g2"])
        pm = pf.pathway_scores(self._genes([0.8, -0.3]), gp)
        assert pm.scores[0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_singleton_is_identity(self):
        gp = pf.build_gene_pathway_map([genio.PathwayDef("P", "", ("g2",))], ["g1", "g2"])
        pm = pf.pathway_scores(self._genes([0.8, -0.3]), gp)
        assert pm.scores[0, 0] == -0.3

    def test_shared_gene_counts_fully_in_both(self):
        pws = [genio.PathwayDef("A", "", ("g1",)), genio.PathwayDef("B", "", ("g1", "g2"))]
        gp = pf.build_gene_pathway_map(pws, ["g1", "g2"])
        pm = pf.pathway_scores(self._genes([1.5, 2.0]), gp)
        assert pm.scores[0].tolist() == [1.5, 3.5]

    def test_pathway_without_retained_gene_is_reported(self):
        report = pf.DropReport()
        pws = [genio.PathwayDef("A", "", ("gone",)), genio.PathwayDef("B", "", ("g1",))]
        gp = pf.build_gene_pathway_map(pws, ["g1"], report)
        assert gp.pathway_ids == ["B"]
        assert report.pathways[0]["pathway"] == "A"

    def test_drop_report_json(self, tmp_path):
        report = pf.DropReport([{"gene": "X", "reason": "r"}], [])
        report.write(tmp_path / "d.json")
        assert json.loads((tmp_path / "d.json").read_text()) == {
            "dropped_genes": [{"gene": "X", "reason": "r"}], "dropped_pathways": []}


class TestNormalization:
    def test_two_value_column(self):
        m = pf.PathwayMatrix(["a", "b"], ["P"], np.array([[1.0], [3.0]]))
        z = pf.normalize_pathways(m, [0, 1])
        assert z.mean.tolist() == [2.0] and z.std.tolist() == [1.0]
        assert z.scores[:, 0].tolist() == [-1.0, 1.0]

    def test_constant_column(self):
        m = pf.PathwayMatrix(["a", "b", "c"], ["P"], np.array([[4.0], [4.0], [9.0]]))
        z = pf.normalize_pathways(m, [0, 1])
        assert z.scores[:, 0].tolist() == [0.0, 0.0, 0.0]

    def test_stored_stats_on_held_out(self):
        held = pf.PathwayMatrix(["x"], ["P"], np.array([[2.0]]))
        out = pf.apply_pathway_normalization(held, np.array([2.0]), np.array([1.0]))
        assert out.scores[0, 0] == 0.0

    def test_train_rows_only(self):
        m = pf.PathwayMatrix(["a", "b", "c"], ["P"], np.array([[1.0], [3.0], [1000.0]]))
        z = pf.normalize_pathways(m, [0, 1])
        assert z.scores[2, 0] == 998.0


class TestOracleEquivalence:
    @settings(max_examples=200, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, seed):
        snps, genes, pathways, betas, dosages, window_kb = random_instance(seeded(seed))
        pm, means = _pipeline(snps, genes, pathways, betas, dosages, window_kb)
        ids, rows = brute_pathway_scores(dosages, snps, betas, genes, pathways, window_kb, means)
        assert pm.pathway_ids == ids
        if ids:
            np.testing.assert_allclose(pm.scores, np.array(rows), rtol=0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([2.0, 0.5, -4.0, 0.25]))
    def test_linearity_in_betas(self, seed, c):
        # powers of two keep the scaling exact in binary floating point
        snps, genes, pathways, betas, dosages, w = random_instance(seeded(seed))
        base, _ = _pipeline(snps, genes, pathways, betas, dosages, w)
        scaled, _ = _pipeline(snps, genes, pathways, {k: c * v for k, v in betas.items()}, dosages, w)
        np.testing.assert_array_equal(scaled.scores, c * base.scores)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.randoms(use_true_random=False))
    def test_subject_permutation(self, seed, rnd):
        snps, genes, pathways, betas, dosages, w = random_instance(seeded(seed), n_subjects=5)
        perm = list(range(5))
        rnd.shuffle(perm)
        base, _ = _pipeline(snps, genes, pathways, betas, dosages, w)
        permuted, _ = _pipeline(snps, genes, pathways, betas, [dosages[i] for i in perm], w)
        np.testing.assert_array_equal(permuted.scores, base.scores[perm])


class TestFeatureBuilder:
    def test_synthetic_cohort(self, small_cohort):
        c = small_cohort
        pws = [p for p in c.pathways if p.pathway_id not in c.exclusions]
        fb = pf.FeatureBuilder(c.genotypes, c.gwas, c.genes, pws)
        pm = fb.build()
        assert pm.scores.shape == (40, 8)
        assert np.all(np.isfinite(pm.scores))
        assert fb.pathway_ids == [p.pathway_id for p in pws]

    def test_matrix_file_round_trip(self, small_cohort, tmp_path):
        c = small_cohort
        fb = pf.FeatureBuilder(c.genotypes, c.gwas, c.genes, c.pathways)
        pm = fb.build()
        pf.write_pathway_matrix(pm, tmp_path / "pm.tsv")
        assert pf.read_pathway_matrix(tmp_path / "pm.tsv") == pm
