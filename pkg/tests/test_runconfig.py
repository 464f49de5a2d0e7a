import pytest

from specgen.runconfig import ConfigError, parse_text, resolve, to_text

SCHEMA = {
    "train": {"steps": (int, 100), "lr": (float, 1e-4), "resume": (bool, False)},
    "model": {"name": (str, "small")},
}


def test_defaults_when_empty():
    r = resolve(SCHEMA)
    assert r["train"]["steps"] == 100
    assert r["train"]["lr"] == 1e-4
    assert r["model"]["name"] == "small"


def test_file_text_then_overrides():
    text = "[train]\nsteps = 500\nlr = 2e-3\n"
    r = resolve(SCHEMA, text, {("train", "steps"): 900})
    assert r["train"]["steps"] == 900
    assert r["train"]["lr"] == 2e-3


def test_none_override_is_ignored():
    r = resolve(SCHEMA, "", {("train", "steps"): None})
    assert r["train"]["steps"] == 100


def test_unknown_key_rejected():
    with pytest.raises(ConfigError) as exc:
        resolve(SCHEMA, "[train]\nstepz = 5\n")
    assert "stepz" in str(exc.value)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError) as exc:
        resolve(SCHEMA, "[nope]\nx = 1\n")
    assert "nope" in str(exc.value)


def test_bad_value_type_rejected():
    with pytest.raises(ConfigError):
        resolve(SCHEMA, "[train]\nsteps = banana\n")


def test_bool_parsing():
    assert resolve(SCHEMA, "[train]\nresume = true\n")["train"]["resume"] is True
    assert resolve(SCHEMA, "[train]\nresume = 0\n")["train"]["resume"] is False
    with pytest.raises(ConfigError):
        resolve(SCHEMA, "[train]\nresume = maybe\n")


def test_to_text_round_trip_and_stability():
    r = resolve(SCHEMA, "[train]\nsteps = 7\n")
    text = to_text(r)
    assert text == to_text(resolve(SCHEMA, text))
    parsed = parse_text(text)
    assert parsed["train"]["steps"] == "7"
    assert parsed["train"]["resume"] == "false"


def test_keys_preserve_case():
    schema = {"diffusion": {"T": (int, 1000)}}
    r = resolve(schema, "[diffusion]\nT = 10\n")
    assert r["diffusion"]["T"] == 10
