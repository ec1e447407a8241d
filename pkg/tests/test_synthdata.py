"""Tests for synthdata.py"""

import json
from dataclasses import replace

import numpy as np
import pytest

from ucr.config import HyperParams
from ucr.core import Rng
from ucr.encoder import init_params
from ucr.errors import ConfigError, DataError, FormatError
from ucr.evaluation import evaluate
from ucr.pseudo_label import pseudo_labels
from ucr.synthdata import (
    INDEX_FILE,
    StreamSpec,
    generate_stream,
    read_dataset,
    write_dataset,
)


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.fixture
def small_spec():
    return StreamSpec(
        num_domains=2, ids_per_domain=6, samples_per_id=5, cameras_per_domain=2, d_in=8,
        eval_ids=2, num_unseen=1, seed=3,
    )


class TestStreamSpec:
    """Tests for StreamSpec validation."""

    def test_defaults_are_desk_scale(self):
        """Test defaults are desk scale."""
        spec = StreamSpec()
        total = (spec.num_domains + spec.num_unseen) * spec.ids_per_domain * spec.samples_per_id
        assert total < 4000

    @pytest.mark.parametrize(
        "overrides,key",
        [
            ({"num_domains": 0}, "num_domains"),
            ({"samples_per_id": 0}, "samples_per_id"),
            ({"noise": -0.1}, "noise"),
            ({"eval_ids": 30}, "eval_ids"),
            ({"latent_dim": 0}, "latent_dim"),
            ({"latent_dim": 33}, "latent_dim"),
            ({"style_shift": -0.5}, "style_shift"),
        ],
    )
    def test_invalid(self, overrides, key):
        """Test invalid values name the offending key."""
        with pytest.raises(ConfigError) as exc:
            StreamSpec(**overrides)
        assert exc.value.key == key


class TestGenerateStream:
    """Tests for generate_stream."""

    def test_structure(self, small_spec):
        """Test generated stream layout and split sizes."""
        stream = generate_stream(small_spec)
        assert [r.name for r in stream.seen] == ["seen_0", "seen_1"]
        assert [r.name for r in stream.unseen] == ["unseen_0"]
        record = stream.seen[0]
        assert record.features.shape == (30, 8)
        assert record.features.dtype == np.float32
        assert len(record.train_indices) == 4 * 5
        assert len(record.query_indices) == 2
        assert len(record.gallery_indices) == 2 * 4

    def test_train_and_eval_identities_are_disjoint(self, small_spec):
        """Test train and eval identities are disjoint."""
        for record in generate_stream(small_spec).seen:
            train_ids = set(record.gt_ids[record.train_indices].tolist())
            eval_ids = set(record.gt_ids[record.query_indices].tolist())
            assert not train_ids & eval_ids
            assert set(record.gt_ids[record.gallery_indices].tolist()) == eval_ids

    def test_unseen_domains_are_never_trained(self, small_spec):
        """Test unseen domains are never trained."""
        record = generate_stream(small_spec).unseen[0]
        assert len(record.train_indices) == 0
        assert len(record.query_indices) == small_spec.ids_per_domain

    def test_identities_are_unique_across_domains(self, small_spec):
        """Test identities are unique across domains."""
        stream = generate_stream(small_spec)
        seen = [set(r.gt_ids.tolist()) for r in stream.seen + stream.unseen]
        assert not seen[0] & seen[1] and not seen[1] & seen[2]

    def test_same_seed_same_stream(self, small_spec):
        """Test same seed same stream."""
        a, b = generate_stream(small_spec), generate_stream(small_spec)
        for ra, rb in zip(a.seen + a.unseen, b.seen + b.unseen):
            np.testing.assert_array_equal(ra.features, rb.features)

    def test_different_seed_differs(self, small_spec):
        """Test different seed differs."""
        a = generate_stream(small_spec)
        b = generate_stream(replace(small_spec, seed=4))
        assert not np.array_equal(a.seen[0].features, b.seen[0].features)

    def test_noiseless_identities_collapse(self):
        """Test noiseless identities collapse."""
        spec = StreamSpec(
            num_domains=1, ids_per_domain=4, samples_per_id=6, d_in=8, eval_ids=1,
            num_unseen=0, noise=0.0, camera_shift=0.0,
        )
        record = generate_stream(spec).seen[0]
        for gt in np.unique(record.gt_ids):
            rows = record.features[record.gt_ids == gt]
            assert np.all(rows == rows[0])

    def test_domains_are_shifted(self, small_spec):
        """Test domains are shifted."""
        stream = generate_stream(small_spec)
        means = [r.features.mean(axis=0) for r in stream.seen]
        assert np.linalg.norm(means[0] - means[1]) > 0.1

    def test_views(self, small_spec):
        """Test train and evaluation views of a stream."""
        stream = generate_stream(small_spec)
        domains = stream.train_domains()
        assert [d.name for d in domains] == ["seen_0", "seen_1"]
        assert [d.name for d in stream.train_domains(reverse=True)] == ["seen_1", "seen_0"]
        assert len(domains[0]) == 20
        assert domains[1].domain_id == 1
        assert [s.name for s in stream.seen_splits()] == ["seen_0", "seen_1"]
        assert stream.split("unseen_0").name == "unseen_0"
        with pytest.raises(DataError):
            stream.split("nope")

    def test_queries_are_first_camera(self, small_spec):
        """Test queries are first camera."""
        split = generate_stream(small_spec).seen_splits()[0]
        assert all(s.camera_id == 0 for s in split.query)
        assert {s.camera_id for s in split.gallery} == {0, 1}

    @pytest.mark.parametrize("seed", range(5))
    def test_separable_stream_clusters_by_identity(self, seed):
        """Test separable stream clusters by identity."""
        spec = StreamSpec(
            num_domains=1, ids_per_domain=4, samples_per_id=8, d_in=32, eval_ids=0,
            num_unseen=0, noise=0.01, camera_shift=0.0, latent_dim=32, seed=seed,
        )
        record = generate_stream(spec).seen[0]
        labeling = pseudo_labels(_unit_rows(record.features), HyperParams())
        assert labeling.num_clusters == 4
        for a in range(4):
            assert len(set(record.gt_ids[labeling.members(a)].tolist())) == 1

    @pytest.mark.parametrize("seed", range(3))
    def test_ten_identities_recovered(self, seed):
        """Test ten identities recovered."""
        spec = StreamSpec(
            num_domains=1, ids_per_domain=10, samples_per_id=8, d_in=32, eval_ids=0,
            num_unseen=0, noise=0.01, camera_shift=0.0, latent_dim=32, seed=seed,
        )
        record = generate_stream(spec).seen[0]
        labeling = pseudo_labels(_unit_rows(record.features), HyperParams())
        assert labeling.num_clusters == 10

    def test_noiseless_stream_has_perfect_recall(self):
        """Test noiseless stream has perfect recall."""
        spec = StreamSpec(
            num_domains=1, ids_per_domain=6, samples_per_id=4, cameras_per_domain=2, d_in=8,
            eval_ids=3, num_unseen=0, noise=0.0, camera_shift=0.0,
        )
        split = generate_stream(spec).seen_splits()[0]
        params = init_params([8, 16, 8], Rng(5))
        report = evaluate(params, split)
        assert report.mAP == pytest.approx(1.0)
        assert report.rank(1) == 1.0


def _centered(features):
    features = np.asarray(features, dtype=np.float64)
    return features - features.mean(axis=0)


class TestIdentitySubspaces:
    """Tests for the per-domain identity subspaces and the style variation."""

    @pytest.fixture
    def clean(self):
        return dict(
            num_domains=2, ids_per_domain=10, samples_per_id=4, cameras_per_domain=2, d_in=16,
            eval_ids=0, num_unseen=0, latent_dim=4, noise=0.0, camera_shift=0.0,
            domain_rotation=0.0, seed=7,
        )

    def test_identities_span_latent_dim(self, clean):
        """Test noiseless identities of a domain span exactly latent_dim directions."""
        record = generate_stream(StreamSpec(**clean, style_shift=0.0)).seen[0]
        singular = np.linalg.svd(_centered(record.features), compute_uv=False)
        assert singular[3] > 1e-2
        assert singular[4] < 1e-3

    def test_single_domain_has_no_style(self, clean):
        """Test style only comes from other seen domains."""
        spec = StreamSpec(**dict(clean, num_domains=1), style_shift=0.0)
        styled = replace(spec, style_shift=2.0)
        np.testing.assert_array_equal(
            generate_stream(spec).seen[0].features, generate_stream(styled).seen[0].features
        )

    def test_style_is_orthogonal_to_own_identities(self, clean):
        """Test style variation never moves a sample along its own identity directions."""
        plain = generate_stream(StreamSpec(**clean, style_shift=0.0))
        styled = generate_stream(StreamSpec(**clean, style_shift=1.0))
        for a, b in zip(plain.seen, styled.seen):
            style = b.features.astype(np.float64) - a.features
            assert np.linalg.norm(style, axis=1).min() > 0.1
            identity = _centered(a.features)
            np.testing.assert_allclose(style @ identity.T, 0.0, atol=1e-4)

    def test_style_lives_in_the_other_domain_identities(self, clean):
        """Test one domain's style spans the other domain's identity directions."""
        plain = generate_stream(StreamSpec(**clean, style_shift=0.0))
        styled = generate_stream(StreamSpec(**clean, style_shift=1.0))
        style = styled.seen[0].features.astype(np.float64) - plain.seen[0].features
        _, _, vt = np.linalg.svd(_centered(plain.seen[1].features))
        directions = vt[:4]
        residual = style - style @ directions.T @ directions
        np.testing.assert_allclose(residual, 0.0, atol=1e-4)

    def test_style_makes_the_default_stream_harder(self):
        """Test style widens identities compared with the same stream without it."""
        spec = StreamSpec(num_unseen=0, camera_shift=0.0, noise=0.0)
        plain = generate_stream(replace(spec, style_shift=0.0)).seen[1]
        styled = generate_stream(spec).seen[1]

        def spread(record):
            return np.mean([
                np.linalg.norm(_centered(record.features[record.gt_ids == gt]), axis=1).mean()
                for gt in np.unique(record.gt_ids)
            ])

        assert spread(plain) < 1e-5
        assert spread(styled) > 0.5


class TestDatasetFiles:
    """Tests for write_dataset / read_dataset."""

    def test_round_trip(self, tmp_path, small_spec):
        """Test round trip."""
        stream = generate_stream(small_spec)
        write_dataset(stream, tmp_path / "ds")
        loaded = read_dataset(tmp_path / "ds")
        assert loaded.d_in == stream.d_in
        for a, b in zip(stream.seen + stream.unseen, loaded.seen + loaded.unseen):
            assert a.name == b.name and a.domain_id == b.domain_id
            assert a.num_cameras == b.num_cameras
            np.testing.assert_array_equal(a.features, b.features)
            for field in ("camera_ids", "gt_ids", "train_indices", "query_indices", "gallery_indices"):
                np.testing.assert_array_equal(getattr(a, field), getattr(b, field))

    def test_same_seed_same_bytes(self, tmp_path, small_spec):
        """Test same seed same bytes."""
        write_dataset(generate_stream(small_spec), tmp_path / "a")
        write_dataset(generate_stream(small_spec), tmp_path / "b")
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in names:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_index_layout(self, tmp_path, small_spec):
        """Test index layout."""
        write_dataset(generate_stream(small_spec), tmp_path)
        index = json.loads((tmp_path / INDEX_FILE).read_text())
        assert index["format"] == "ucr-dataset"
        assert index["version"] == 1
        assert index["seen"] == ["seen_0.json", "seen_1.json"]
        manifest = json.loads((tmp_path / "seen_0.json").read_text())
        assert manifest["feature_file"] == "seen_0.ucrf"

    def test_corrupt_feature_magic(self, tmp_path, small_spec):
        """Test corrupt feature magic."""
        write_dataset(generate_stream(small_spec), tmp_path)
        path = tmp_path / "seen_0.ucrf"
        path.write_bytes(b"JUNK" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="bad magic"):
            read_dataset(tmp_path)

    def test_feature_version_mismatch(self, tmp_path, small_spec):
        """Test feature version mismatch."""
        write_dataset(generate_stream(small_spec), tmp_path)
        path = tmp_path / "seen_1.ucrf"
        data = bytearray(path.read_bytes())
        data[4] += 1
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="unsupported version"):
            read_dataset(tmp_path)

    def test_truncated_feature_file(self, tmp_path, small_spec):
        """Test truncated feature file."""
        write_dataset(generate_stream(small_spec), tmp_path)
        path = tmp_path / "unseen_0.ucrf"
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(FormatError, match="truncated file"):
            read_dataset(tmp_path)

    def test_index_version_mismatch(self, tmp_path, small_spec):
        """Test index version mismatch."""
        write_dataset(generate_stream(small_spec), tmp_path)
        index = json.loads((tmp_path / INDEX_FILE).read_text())
        index["version"] = 2
        (tmp_path / INDEX_FILE).write_text(json.dumps(index))
        with pytest.raises(FormatError, match="unsupported version"):
            read_dataset(tmp_path)

    def test_missing_index(self, tmp_path):
        """Test missing index."""
        with pytest.raises(DataError):
            read_dataset(tmp_path)

    def test_out_of_range_indices(self, tmp_path, small_spec):
        """Test out of range indices."""
        write_dataset(generate_stream(small_spec), tmp_path)
        manifest = json.loads((tmp_path / "seen_0.json").read_text())
        manifest["query_indices"] = [999]
        (tmp_path / "seen_0.json").write_text(json.dumps(manifest))
        with pytest.raises(DataError, match="out of range"):
            read_dataset(tmp_path)
