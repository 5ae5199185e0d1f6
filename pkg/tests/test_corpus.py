import json
import logging

import numpy as np
import pytest

from config import DATA_DIR
from services.corpus import (
    DayRecord,
    FilterConfig,
    Vocabulary,
    build_cohort,
    cohort_stats,
    diagnosis_families_from_codes,
    filter_cohort,
    load_cohort,
    round_half_up,
    save_cohort,
    split_cohort,
)
from services.errors import CohortFormatError, ConfigError, InputError
from services.synthetic import SyntheticSpec, generate_synthetic

SAMPLE = DATA_DIR / "sample_cohort.jsonl"
HEADER = json.dumps({"schema": "inpatient2vec-cohort", "version": 1})


def write_lines(path, *lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def visit_line(visit_id="V1", diagnosis="D1", days=(("A1",), ("A2",))):
    return json.dumps({"visit_id": visit_id, "diagnosis": diagnosis, "days": [list(d) for d in days]})


class TestVocabulary:
    def test_special_token_ids(self, tiny_cohort):
        vocab = tiny_cohort.vocabulary
        assert vocab.n_activities == 5
        assert (vocab.cls_id, vocab.mask_id, vocab.pad_id, vocab.n_tokens) == (5, 6, 7, 8)

    def test_max_los_per_diagnosis(self, tiny_cohort):
        vocab = tiny_cohort.vocabulary
        assert vocab.diagnosis_codes == ("D00.001", "D01.002")
        assert vocab.max_los == (3, 4)

    def test_dict_round_trip_keeps_digest(self, tiny_cohort):
        vocab = tiny_cohort.vocabulary
        again = Vocabulary.from_dict(vocab.to_dict())
        assert again == vocab
        assert again.digest() == vocab.digest()

    def test_unknown_code(self, tiny_cohort):
        with pytest.raises(InputError):
            tiny_cohort.vocabulary.activity_id("nope")


class TestDayRecord:
    def test_sorted_and_deduplicated(self):
        assert DayRecord.of([3, 1, 3]).activities == (1, 3)

    def test_empty_day_rejected(self):
        with pytest.raises(ValueError):
            DayRecord(())


class TestLoadCohort:
    def test_sample_file(self, caplog):
        with caplog.at_level(logging.WARNING):
            cohort = load_cohort(SAMPLE)
        assert len(cohort) == 6
        assert "Merged 1 duplicate" in caplog.text
        assert cohort.provenance["generator"] == "hand-written sample"
        visit = cohort.visits[3]
        assert [len(d) for d in visit.days] == [2, 2]

    def test_save_load_preserves_visits(self, tiny_cohort, tmp_path):
        path = save_cohort(tiny_cohort, tmp_path / "tiny.jsonl")
        again = load_cohort(path)
        assert again.to_codes() == tiny_cohort.to_codes()
        assert again.vocabulary == tiny_cohort.vocabulary

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            load_cohort(tmp_path / "absent.jsonl")

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        with pytest.raises(CohortFormatError):
            load_cohort(path)

    def test_wrong_schema(self, tmp_path):
        path = write_lines(tmp_path / "c.jsonl", json.dumps({"schema": "other", "version": 1}), visit_line())
        with pytest.raises(CohortFormatError) as exc:
            load_cohort(path)
        assert exc.value.line_number == 1

    @pytest.mark.parametrize("bad", [
        json.dumps({"visit_id": "V2", "diagnosis": "D1", "days": [[]]}),
        json.dumps({"visit_id": "V2", "diagnosis": "D1", "days": "A1"}),
        json.dumps({"visit_id": "", "diagnosis": "D1", "days": [["A1"]]}),
        json.dumps({"visit_id": "V2", "days": [["A1"]]}),
        "{not json",
    ])
    def test_bad_visit_reports_line(self, tmp_path, bad):
        path = write_lines(tmp_path / "c.jsonl", HEADER, visit_line(), bad)
        with pytest.raises(CohortFormatError) as exc:
            load_cohort(path)
        assert exc.value.line_number == 3

    def test_duplicate_visit_id(self, tmp_path):
        path = write_lines(tmp_path / "c.jsonl", HEADER, visit_line(), visit_line())
        with pytest.raises(CohortFormatError, match="duplicate"):
            load_cohort(path)


class TestFilter:
    def test_los_rule_then_frequency(self):
        records = [
            ("V1", "D1", [["A1"]]),
            ("V2", "D1", [["A1"], ["A2"]]),
            ("V3", "D2", [["A1"], ["A3"]]),
            ("V4", "D2", [["A2"], ["A3"], ["A4"]]),
        ]
        # D1 has two visits but only one survives the LOS rule
        kept = filter_cohort(build_cohort(records), min_los=2, max_los=50, min_diag_visits=2, max_diag_visits=10)
        assert [v.visit_id for v in kept.visits] == ["V3", "V4"]
        assert kept.vocabulary.diagnosis_codes == ("D2",)
        assert kept.vocabulary.activity_codes == ("A1", "A2", "A3", "A4")

    def test_scaled_bounds(self):
        assert FilterConfig(scale=0.1).diag_bounds() == (10, 300)
        assert FilterConfig(scale=0.5).diag_bounds() == (50, 1500)

    def test_sample_drops_single_day_visit(self):
        kept = FilterConfig(min_diag_visits=1).apply(load_cohort(SAMPLE))
        assert "S0006" not in [v.visit_id for v in kept.visits]
        assert len(kept) == 5

    @pytest.mark.parametrize("seed", range(5))
    def test_bounds_hold_and_refiltering_is_a_no_op(self, seed):
        spec = SyntheticSpec(n_visits=150, n_activities=20, n_clusters=4, n_diagnoses=6, n_families=2,
                             mean_los=5.0, seed=seed)
        cohort, _ = generate_synthetic(spec)
        bounds = dict(min_los=3, max_los=7, min_diag_visits=12, max_diag_visits=30)
        kept = filter_cohort(cohort, **bounds)

        assert all(3 <= v.los <= 7 for v in kept.visits)
        assert len(kept) > 0
        counts = np.bincount([v.diagnosis for v in kept.visits], minlength=kept.vocabulary.n_diagnoses)
        assert all(12 <= c <= 30 for c in counts)
        original = {v.visit_id: v for v in cohort.visits}
        for visit_id, diag, days in kept.to_codes():
            source = original[visit_id]
            assert cohort.vocabulary.diagnosis_codes[source.diagnosis] == diag
            assert len(source.days) == len(days)

        again = filter_cohort(kept, **bounds)
        assert again.to_codes() == kept.to_codes()
        assert again.vocabulary == kept.vocabulary


class TestStats:
    def test_tiny_cohort(self, tiny_cohort):
        stats = cohort_stats(tiny_cohort)
        assert stats.n_visits == 4
        assert stats.n_days == 11
        assert stats.n_diagnoses == 2
        assert stats.n_activities == 5
        assert stats.mean_los == pytest.approx(11 / 4)
        assert stats.mean_activities_per_day == pytest.approx(tiny_cohort.n_tokens / 11)
        assert [name for name, _ in stats.rows()][0] == "# of visits"


class TestSplit:
    def test_sizes_from_ratios(self, small_cohort):
        cohort = small_cohort.subset(range(40), "first40")
        train, valid, test = split_cohort(cohort, (0.75, 0.1, 0.15), seed=3)
        assert (len(train), len(valid), len(test)) == (30, 4, 6)

    def test_hundred_visits(self):
        records = [(f"V{i:03d}", "D1", [["A1"], ["A2"]]) for i in range(100)]
        parts = split_cohort(build_cohort(records), seed=0)
        assert [len(p) for p in parts] == [75, 10, 15]

    def test_disjoint_and_shared_vocabulary(self, small_cohort):
        parts = split_cohort(small_cohort, seed=1)
        ids = [set(v.visit_id for v in p.visits) for p in parts]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert sum(len(s) for s in ids) == len(small_cohort)
        assert all(p.vocabulary is small_cohort.vocabulary for p in parts)

    def test_seed_reproducible(self, small_cohort):
        a = split_cohort(small_cohort, seed=5)[2]
        b = split_cohort(small_cohort, seed=5)[2]
        assert [v.visit_id for v in a.visits] == [v.visit_id for v in b.visits]

    def test_bad_ratios(self, tiny_cohort):
        with pytest.raises(ConfigError):
            split_cohort(tiny_cohort, (0.5, 0.5, 0.5))


def test_round_half_up():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.49)] == [1, 2, 3, 2]


def test_families_from_code_prefix():
    vocab = load_cohort(SAMPLE).vocabulary
    np.testing.assert_array_equal(diagnosis_families_from_codes(vocab), [0, 1, 2])
