import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framechain.chain import (
    CSV_HEADER,
    PromptSpec,
    ReasoningRecord,
    RunManifest,
    TextualThought,
    ThoughtChain,
    TuningPair,
    VisualThought,
    pairs_from_chain,
    read_reasoning_json,
    read_tuning_csv,
    write_reasoning_json,
    write_tuning_csv,
)
from framechain.errors import ValidationError


def make_record(n_key_frames=4):
    return ReasoningRecord(
        input_prompt="Acid is poured onto a wooden table.",
        thoughts="A lab bench scene with a tilted flask above bare wood.",
        consequences="The liquid chars the wood, smoke rises, the mark spreads.",
        context_frame="A wooden table under bright light, a gloved hand tilting a flask.",
        concise_prompt="A flask of acid tilted above a wooden table.",
        key_frames=[f"Stage {i}: the charred patch grows darker." for i in range(1, n_key_frames + 1)],
    )


def make_chain(n=5, size=16, scenario="sulfuric_acid"):
    rng = np.random.default_rng(0)
    visual, textual = [], []
    for i in range(n):
        img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        visual.append(VisualThought(index=i, image=img, file_path=f"{scenario}_{i}.png"))
        textual.append(TextualThought(index=i, text=f"caption {i}"))
    return ThoughtChain(visual=visual, textual=textual).validate()


class TestReasoningJson:
    def test_golden_bytes(self, tmp_path):
        record = ReasoningRecord(
            input_prompt="p",
            thoughts="t",
            consequences="q",
            context_frame="f",
            concise_prompt="c",
            key_frames=["k1", "k2"],
        )
        path = write_reasoning_json(record, tmp_path / "r.json", "demo_scene")
        expected = (
            "{\n"
            '    "demo_scene": {\n'
            '        "input_prompt": "p",\n'
            '        "thoughts": "t",\n'
            '        "consequences": "q",\n'
            '        "context_frame": "f",\n'
            '        "concise_prompt": "c",\n'
            '        "key_frames": [\n'
            '            "k1",\n'
            '            "k2"\n'
            "        ]\n"
            "    }\n"
            "}\n"
        )
        assert path.read_text(encoding="utf-8") == expected

    def test_four_key_frames_field_set(self, tmp_path):
        path = write_reasoning_json(make_record(4), tmp_path / "r.json", "sulfuric_acid")
        data = json.loads(path.read_text(encoding="utf-8"))
        assert list(data) == ["sulfuric_acid"]
        assert list(data["sulfuric_acid"]) == list(ReasoningRecord.FIELDS)
        assert len(data["sulfuric_acid"]["key_frames"]) == 4

    def test_empty_key_frames_valid(self, tmp_path):
        record = make_record(0)
        path = write_reasoning_json(record, tmp_path / "r.json", "single")
        data = json.loads(path.read_text(encoding="utf-8"))
        assert data["single"]["key_frames"] == []

    def test_round_trip_identity(self, tmp_path):
        record = make_record(3)
        path = write_reasoning_json(record, tmp_path / "r.json", "scene")
        scenario, loaded = read_reasoning_json(path)
        assert scenario == "scene"
        assert loaded == record

    def test_writer_deterministic(self, tmp_path):
        a = write_reasoning_json(make_record(), tmp_path / "a.json", "s")
        b = write_reasoning_json(make_record(), tmp_path / "b.json", "s")
        assert a.read_bytes() == b.read_bytes()

    def test_invalid_record_rejected(self, tmp_path):
        record = make_record()
        record.thoughts = ""
        with pytest.raises(ValidationError):
            write_reasoning_json(record, tmp_path / "r.json", "s")


class TestTuningCsv:
    def test_header_and_row_count(self, tmp_path):
        pairs = [TuningPair(f"sulfuric_acid_{i}.png", f"caption, with commas {i}") for i in range(5)]
        path = write_tuning_csv(pairs, tmp_path / "pairs.csv")
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == CSV_HEADER == '"file_name","text"'
        assert len(lines) == 6

    def test_single_pair_two_lines(self, tmp_path):
        path = write_tuning_csv([TuningPair("a.png", "x")], tmp_path / "p.csv")
        assert path.read_text(encoding="utf-8") == '"file_name","text"\n"a.png","x"\n'

    def test_interior_quote_doubling(self, tmp_path):
        path = write_tuning_csv([TuningPair("a.png", 'say "boo" twice')], tmp_path / "p.csv")
        assert '"say ""boo"" twice"' in path.read_text(encoding="utf-8")
        with open(path, newline="", encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[1] == ["a.png", 'say "boo" twice']

    def test_round_trip(self, tmp_path):
        pairs = [TuningPair("a.png", 'x, "y"'), TuningPair("b.png", "z")]
        path = write_tuning_csv(pairs, tmp_path / "p.csv")
        assert read_tuning_csv(path) == pairs

    def test_empty_pairs_rejected(self, tmp_path):
        with pytest.raises(ValidationError):
            write_tuning_csv([], tmp_path / "p.csv")

    @settings(max_examples=50, deadline=None)
    @given(
        st.lists(
            st.tuples(
                st.from_regex(r"[a-z0-9_]{1,12}\.png", fullmatch=True),
                st.text(
                    alphabet=st.characters(blacklist_categories=("Cs", "Cc")),
                    min_size=1,
                    max_size=60,
                ),
            ),
            min_size=1,
            max_size=6,
        )
    )
    def test_round_trip_property(self, tmp_path_factory, rows):
        pairs = [TuningPair(fn, text) for fn, text in rows]
        path = tmp_path_factory.mktemp("csv") / "p.csv"
        write_tuning_csv(pairs, path)
        assert read_tuning_csv(path) == pairs


class TestPairsFromChain:
    def test_five_image_chain(self):
        chain = make_chain(5)
        record = make_record(4)
        pairs = pairs_from_chain(chain, record)
        assert len(pairs) == 5
        assert pairs[0].text == record.concise_prompt
        assert [p.text for p in pairs[1:]] == record.key_frames
        assert [p.file_name for p in pairs] == [f"sulfuric_acid_{i}.png" for i in range(5)]

    def test_single_image_chain(self):
        pairs = pairs_from_chain(make_chain(1), make_record(0))
        assert len(pairs) == 1

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            pairs_from_chain(make_chain(5), make_record(3))

    def test_output_length_matches_chain(self):
        for n in (1, 2, 4, 7):
            assert len(pairs_from_chain(make_chain(n), make_record(n - 1))) == n


class TestDomainTypes:
    def test_prompt_spec_validation(self):
        PromptSpec("a ball", "falling_ball").validate()
        with pytest.raises(ValidationError):
            PromptSpec("  ", "ok_slug").validate()
        with pytest.raises(ValidationError):
            PromptSpec("fine", "Bad Slug!").validate()

    def test_visual_thought_shape_checks(self):
        good = np.zeros((8, 8, 3), dtype=np.uint8)
        VisualThought(0, good, "a.png").validate()
        with pytest.raises(ValidationError):
            VisualThought(0, np.zeros((4, 8, 3), np.uint8), "a.png").validate()
        with pytest.raises(ValidationError):
            VisualThought(0, good, "a.jpg").validate()

    def test_chain_contiguity(self):
        chain = make_chain(3)
        chain.textual[2] = TextualThought(index=5, text="x")
        with pytest.raises(ValidationError):
            chain.validate()

    def test_manifest_stage_keys(self):
        manifest = RunManifest(config_hash="h", seed=1)
        manifest.stage_timings["reasoning"] = 1.0
        manifest.validate()
        with pytest.raises(ValidationError):
            manifest.validate(complete=True)
        manifest.stage_timings.update({"tuning": 2.0, "sampling": 0.5})
        manifest.validate(complete=True)
        manifest.stage_timings["bogus"] = 1.0
        with pytest.raises(ValidationError):
            manifest.validate()

    def test_manifest_round_trip(self):
        manifest = RunManifest(
            config_hash="h", seed=3,
            stage_timings={"reasoning": 1.0},
            artifact_paths={"reasoning_json": "thoughts/reasoning.json"},
            flags={"truncated": True},
        )
        assert RunManifest.from_dict(manifest.to_dict()) == manifest
