import hashlib
import os
import warnings

import numpy as np
import pytest

from neuropathx import genio
from neuropathx import pathway_features as pf
from neuropathx import synthgen as S
from neuropathx.errors import ConfigError
from neuropathx.interpret import AssociationSet


def _digest(directory):
    h = hashlib.sha256()
    for name in sorted(os.listdir(directory)):
        h.update(name.encode())
        h.update(open(os.path.join(directory, name), "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def default_files(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    cohort = S.generate(S.SynthSpec())
    return cohort, S.write_cohort(cohort, out)


class TestSpec:
    @pytest.mark.parametrize("kw", [
        {"n_causal_pathways": 41}, {"n_causal_rois": 0}, {"effect_strength": -1.0},
        {"noise_sd": 0.0}, {"n_genes": 2000, "n_snps": 2000, "chrom_length": 100_000_000},
        {"gene_spacing": 20_000},
    ])
    def test_infeasible(self, kw):
        with pytest.raises(ConfigError):
            S.generate(S.SynthSpec(**kw))


class TestGenerate:
    def test_default_round_trip(self, default_files):
        cohort, paths = default_files
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            geno = genio.parse_genotypes(paths["genotypes"])
            gwas = genio.parse_gwas(paths["gwas"])
            genes = genio.parse_gene_annotations(paths["genes"])
            excl = genio.parse_exclusions(paths["exclude"])
            pws = genio.parse_gmt(paths["gmt"], excl)
            imaging = genio.parse_imaging(paths["imaging"])
            labels = genio.parse_labels(paths["labels"])
        assert geno.dosages.tolist() == cohort.genotypes.dosages.tolist()
        np.testing.assert_array_equal(imaging.features, cohort.imaging.features)
        assert labels.labels.tolist() == cohort.labels.labels.tolist()
        assert len(pws) == 40
        pm = pf.FeatureBuilder(geno, gwas, genes, pws).build()
        assert pm.scores.shape == (200, 40)

    def test_disjoint_snp_blocks(self, default_files):
        cohort, _ = default_files
        smap = pf.build_snp_gene_map(cohort.genotypes.snps, cohort.genes, 50)
        seen = set()
        for m in smap.members:
            assert len(m) == 10 and not seen & set(m.tolist())
            seen |= set(m.tolist())

    def test_betas_only_in_causal_genes(self, default_files):
        cohort, _ = default_files
        causal_genes = {g for p in cohort.pathways if p.pathway_id in cohort.truth.causal_pathways
                        for g in p.gene_symbols}
        smap = pf.build_snp_gene_map(cohort.genotypes.snps, cohort.genes, 50)
        beta = np.array([r.effect_size for r in cohort.gwas])
        for gene, m in zip(cohort.genes, smap.members):
            assert np.any(beta[m] != 0) == (gene.gene_symbol in causal_genes)

    def test_causal_scores_match_features(self, default_files):
        cohort, _ = default_files
        pws = [p for p in cohort.pathways if p.pathway_id not in cohort.exclusions]
        pm = pf.FeatureBuilder(cohort.genotypes, cohort.gwas, cohort.genes, pws).build()
        for pid, scores in cohort.truth.causal_pathway_scores.items():
            np.testing.assert_allclose(pm.scores[:, pm.pathway_ids.index(pid)], scores, rtol=1e-12)

    @pytest.mark.parametrize("n", [2, 7, 40, 201])
    def test_label_balance(self, n):
        c = S.generate(S.SynthSpec(n_subjects=n, seed=n))
        pat = int(c.labels.labels.sum())
        assert abs(pat - (n - pat)) <= 1

    def test_labels_follow_liability(self, default_files):
        cohort, _ = default_files
        liab = np.array([cohort.truth.liability[s] for s in cohort.labels.subject_ids])
        y = cohort.labels.labels
        assert liab[y == 1].min() >= liab[y == 0].max()

    def test_noiseless_limit(self):
        spec = S.SynthSpec(n_subjects=60, effect_strength=2.0, noise_sd=1e-9, seed=4)
        c = S.generate(spec)
        scores = np.array(list(c.truth.causal_pathway_scores.values())).T
        signal = ((scores - scores.mean(0)) / scores.std(0)).sum(1)
        y = c.labels.labels
        assert signal[y == 1].min() > signal[y == 0].max()

    def test_null_leaves_no_trace(self):
        c = S.generate(S.SynthSpec(effect_strength=0.0, seed=2))
        assert all(r.effect_size == 0 for r in c.gwas)
        z = (c.imaging.features - c.imaging.features.mean(0)) / c.imaging.features.std(0)
        causal = [c.imaging.roi_labels.index(r) for r in c.truth.causal_rois]
        liab = np.array([c.truth.liability[s] for s in c.imaging.subject_ids])
        corr = [abs(np.corrcoef(liab, z[:, j, 0])[0, 1]) for j in causal]
        assert max(corr) < 0.3

    def test_causal_rois_carry_liability(self, default_files):
        cohort, _ = default_files
        f = cohort.imaging.features
        z = (f - f.mean(0)) / f.std(0)
        liab = np.array([cohort.truth.liability[s] for s in cohort.imaging.subject_ids])
        for j, roi in enumerate(cohort.imaging.roi_labels):
            r = np.corrcoef(liab, z[:, j, 0])[0, 1]
            assert (r > 0.5) == (roi in cohort.truth.causal_rois)

    def test_byte_identical_files(self, tmp_path):
        spec = S.SynthSpec(n_subjects=30, n_snps=300, n_genes=30, n_pathways=6, n_rois=5, seed=9)
        S.write_cohort(S.generate(spec), tmp_path / "a")
        S.write_cohort(S.generate(spec), tmp_path / "b")
        assert _digest(tmp_path / "a") == _digest(tmp_path / "b")

    def test_ground_truth_load(self, default_files):
        cohort, paths = default_files
        assert S.GroundTruth.load(paths["truth"]) == cohort.truth


class TestRecovery:
    truth = S.GroundTruth(["A", "B", "C"], ["R1", "R2"], {}, {})

    def _assoc(self, inter, pat_rois, nc_rois=()):
        return AssociationSet(intersection=list(inter), top_rois={"PAT": list(pat_rois), "NC": list(nc_rois)})

    def test_perfect(self):
        r = S.recovery_score(self._assoc("ABC", ["R1", "R2"]), self.truth)
        assert (r.pathways, r.rois) == (1.0, 1.0)

    def test_disjoint(self):
        r = S.recovery_score(self._assoc("XYZ", ["R9"]), self.truth)
        assert (r.pathways, r.rois) == (0.0, 0.0)

    def test_two_of_three(self):
        assert S.recovery_score(self._assoc("ABZ", []), self.truth).pathways == pytest.approx(2 / 3)

    def test_rois_counted_over_both_groups(self):
        assert S.recovery_score(self._assoc("", ["R1"], ["R2"]), self.truth).rois == 1.0
