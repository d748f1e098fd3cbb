"""
Tests for the on-disk case format and dataset generation.
"""

import numpy as np
import pytest

from lesionseg.case_io import HEADER_FILE, MASK_FILE, load_case, read_header, save_case
from lesionseg.dataset import DatasetConfig, case_seed, generate_dataset, load_split, read_manifest
from lesionseg.errors import CaseFormatError
from lesionseg.phantom import LesionMask, Volume, count_components


@pytest.fixture
def saved_case(tmp_path, tiny_cases):
    volume, mask = tiny_cases[0]
    return save_case(tmp_path / volume.case_id, volume, mask), volume, mask


@pytest.mark.unit
class TestCaseIO:
    def test_round_trip_is_bit_exact(self, saved_case):
        path, volume, mask = saved_case
        loaded_volume, loaded_mask = load_case(path)
        np.testing.assert_array_equal(loaded_volume.data, volume.data)
        assert loaded_volume.data.dtype == volume.data.dtype
        np.testing.assert_array_equal(loaded_mask.data, mask.data)
        assert loaded_volume.spacing == volume.spacing
        assert loaded_mask.lesion_count == mask.lesion_count

    def test_header_is_canonical(self, saved_case):
        path, volume, _ = saved_case
        lines = (path / HEADER_FILE).read_text().splitlines()
        assert lines[0] == "format = lesionseg-case"
        assert lines[3] == "extents = 4 8 8"
        assert read_header(path)["modalities"] == "t2w adc dwi"

    def test_case_without_mask(self, tmp_path, tiny_cases):
        path = save_case(tmp_path / "nomask", tiny_cases[0][0])
        assert not (path / MASK_FILE).exists()
        assert load_case(path)[1] is None

    def test_truncated_payload(self, saved_case):
        path, _, _ = saved_case
        blob = path / "adc.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(CaseFormatError, match="truncated") as excinfo:
            load_case(path)
        assert excinfo.value.field == "adc"

    def test_extents_disagree_with_payload(self, saved_case):
        path, _, _ = saved_case
        header = path / HEADER_FILE
        header.write_text(header.read_text().replace("extents = 4 8 8", "extents = 4 8 4"))
        with pytest.raises(CaseFormatError) as excinfo:
            load_case(path)
        assert excinfo.value.field == "t2w"

    @pytest.mark.parametrize(
        "old,new,field",
        [
            ("version = 1", "version = 2", "version"),
            ("dtype = float32", "dtype = int16", "dtype"),
            ("byte_order = little", "byte_order = big", "byte_order"),
            ("spacing = 1.0 1.0 1.0", "spacing = 1.0 1.0", "spacing"),
            ("lesion_count = 1", "lesion_count = one", "lesion_count"),
            ("mask = true", "mask = yes", "mask"),
        ],
    )
    def test_invalid_header_names_field(self, saved_case, old, new, field):
        path, _, _ = saved_case
        header = path / HEADER_FILE
        header.write_text(header.read_text().replace(old, new))
        with pytest.raises(CaseFormatError) as excinfo:
            load_case(path)
        assert excinfo.value.field == field

    def test_missing_and_unknown_fields(self, saved_case):
        path, _, _ = saved_case
        header = path / HEADER_FILE
        text = header.read_text()
        header.write_text(text.replace("byte_order = little\n", ""))
        with pytest.raises(CaseFormatError) as excinfo:
            read_header(path)
        assert excinfo.value.field == "byte_order"
        header.write_text(text + "extra = 1\n")
        with pytest.raises(CaseFormatError) as excinfo:
            read_header(path)
        assert excinfo.value.field == "extra"

    def test_mask_extent_mismatch_on_save(self, tmp_path, tiny_cases):
        volume, _ = tiny_cases[0]
        _, other = tiny_cases[1]
        bad = other.model_copy(update={"data": other.data[:2]})
        with pytest.raises(CaseFormatError):
            save_case(tmp_path / "bad", volume, bad)

    def test_non_binary_mask_rejected(self, saved_case):
        path, _, _ = saved_case
        payload = bytearray((path / MASK_FILE).read_bytes())
        payload[0] = 2
        (path / MASK_FILE).write_bytes(bytes(payload))
        with pytest.raises(CaseFormatError) as excinfo:
            load_case(path)
        assert excinfo.value.field == "mask"

    def test_lesion_count_checked_against_mask(self, saved_case):
        path, _, mask = saved_case
        header = path / HEADER_FILE
        header.write_text(
            header.read_text().replace(
                f"lesion_count = {mask.lesion_count}", f"lesion_count = {mask.lesion_count + 1}"
            )
        )
        with pytest.raises(CaseFormatError, match="component") as excinfo:
            load_case(path)
        assert excinfo.value.field == "lesion_count"

    def test_ellipsoids_are_not_stored(self, saved_case):
        path, _, mask = saved_case
        assert mask.lesions
        assert load_case(path)[1].lesions == []


def random_case(seed):
    """A case with random extents, spacing, modalities, dtype and optional mask."""
    rng = np.random.default_rng(seed)
    extents = tuple(int(n) for n in rng.integers(1, 7, size=3))
    modalities = tuple(f"m{i}" for i in range(int(rng.integers(1, 5))))
    dtype = ("float32", "float64")[seed % 2]
    data = rng.normal(0, rng.uniform(0.1, 100), size=(len(modalities), *extents)).astype(dtype)
    spacing = tuple(float(s) for s in rng.uniform(0.1, 5.0, size=3))
    volume = Volume(case_id=f"case_{seed:04d}", modalities=modalities, data=data, spacing=spacing)
    mask = None
    if seed % 3:
        mask_data = (rng.random(extents) < 0.3).astype(np.uint8)
        mask = LesionMask(data=mask_data, lesion_count=count_components(mask_data))
    return volume, mask


def directory_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


@pytest.mark.unit
class TestRandomizedRoundTrip:
    @pytest.mark.parametrize("seed", range(50))
    def test_bit_exact(self, tmp_path, seed):
        volume, mask = random_case(seed)
        first = save_case(tmp_path / "first", volume, mask)
        loaded_volume, loaded_mask = load_case(first)

        assert loaded_volume.data.dtype == volume.data.dtype
        assert loaded_volume.data.tobytes() == volume.data.tobytes()
        assert loaded_volume.spacing == volume.spacing
        assert loaded_volume.modalities == volume.modalities
        if mask is None:
            assert loaded_mask is None
        else:
            assert loaded_mask.data.tobytes() == mask.data.tobytes()
            assert loaded_mask.lesion_count == mask.lesion_count

        second = save_case(tmp_path / "second", loaded_volume, loaded_mask)
        assert directory_bytes(second) == directory_bytes(first)


@pytest.mark.unit
class TestDataset:
    def test_manifest_and_splits(self, tiny_dataset, tiny_config):
        manifest = read_manifest(tiny_dataset)
        assert manifest["split"].tolist() == ["train", "train", "val", "test"]
        assert manifest["case_id"].tolist() == [f"case_{i:04d}" for i in range(4)]
        assert manifest["seed"].tolist() == [case_seed(0, i) for i in range(4)]
        assert len(load_split(tiny_dataset, "train")) == 2
        volume, mask = load_split(tiny_dataset, "test")[0]
        assert volume.case_id == "case_0003" and mask is not None

    def test_regeneration_is_identical(self, tiny_dataset, tiny_config, tmp_path):
        again = tmp_path / "again"
        generate_dataset(tiny_config.data, again)
        for split in ("train", "val", "test"):
            for (va, ma), (vb, mb) in zip(load_split(tiny_dataset, split), load_split(again, split), strict=True):
                np.testing.assert_array_equal(va.data, vb.data)
                np.testing.assert_array_equal(ma.data, mb.data)

    def test_workers_do_not_change_cases(self, tiny_config, tmp_path):
        serial = generate_dataset(tiny_config.data, tmp_path / "serial")
        parallel = generate_dataset(tiny_config.data, tmp_path / "parallel", workers=2)
        assert serial.equals(parallel)
        a = load_split(tmp_path / "serial", "val")[0][0]
        b = load_split(tmp_path / "parallel", "val")[0][0]
        np.testing.assert_array_equal(a.data, b.data)

    def test_case_seeds_are_distinct(self):
        seeds = {case_seed(0, i) for i in range(50)}
        assert len(seeds) == 50

    def test_split_assignment(self):
        cfg = DatasetConfig(n_train=2, n_val=1, n_test=2)
        assert [cfg.split_of(i) for i in range(cfg.n_cases)] == ["train", "train", "val", "test", "test"]

    def test_unknown_split(self, tiny_dataset):
        with pytest.raises(ValueError):
            load_split(tiny_dataset, "holdout")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_manifest(tmp_path)
