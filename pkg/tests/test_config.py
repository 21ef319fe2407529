"""Tests for experiment configuration and seed derivation."""

import json

import pytest

from tdmix import config as cfg
from tdmix import seeding
from tdmix.errors import ConfigError


class TestParseConfig:
    """Tests for validation and error paths."""

    def test_minimal_config(self, minimal_config):
        """The fixture config validates and keeps its values."""
        config = cfg.parse_config(minimal_config)
        assert config.T == 100
        assert config.chain.kind.value == "two_state"
        assert config.windows.mixing == (1, 20)
        assert config.diagnostics.blocks is False

    def test_defaults(self):
        """An empty document is a renewal chain with linear tabular TD."""
        config = cfg.parse_config({})
        assert config.chain.kind.value == "renewal"
        assert config.model.kind == "linear"
        assert config.schedule.eta == 0.8
        assert config.beta_nominal == pytest.approx(1.5)

    @pytest.mark.parametrize(
        "patch, path",
        [
            ({"schedule": {"eta": 0.3}}, "schedule.eta"),
            ({"discount": 1.0}, "discount"),
            ({"chain": {"kind": "renewal", "bogus": 1}}, "chain.bogus"),
            ({"seeds": {"seeds": [4, 4]}}, "seeds.seeds"),
            ({"windows": {"mixing": [5, 5]}}, "windows.mixing"),
            ({"T": 0}, "T"),
        ],
    )
    def test_error_carries_field_path(self, minimal_config, patch, path):
        """ConfigError names the dotted path of the first bad field."""
        with pytest.raises(ConfigError) as excinfo:
            cfg.parse_config({**minimal_config, **patch})
        assert excinfo.value.field_path == path

    def test_matrix_chain_needs_matrix(self):
        """A matrix chain without P is rejected at the chain section."""
        with pytest.raises(ConfigError) as excinfo:
            cfg.parse_config({"chain": {"kind": "matrix"}})
        assert excinfo.value.field_path == "chain"

    def test_beta_nominal(self):
        """Configured beta wins; renewal chains fall back to kappa - 1."""
        assert cfg.parse_config({"chain": {"kind": "renewal", "kappa": 3.0}}).beta_nominal == 2.0
        assert cfg.parse_config({"diagnostics": {"beta_nominal": 0.7}}).beta_nominal == 0.7
        assert cfg.parse_config({"chain": {"kind": "two_state"}}).beta_nominal == 1.0

    def test_gradient_draws_default(self):
        """Ten thousand draws unless overridden."""
        assert cfg.parse_config({}).diagnostics.gradient_draws == cfg.MIN_GRADIENT_DRAWS == 10_000
        assert cfg.parse_config({"diagnostics": {"gradient_draws": 20}}).diagnostics.gradient_draws == 20

    def test_acceptance_needs_full_draws(self):
        """Acceptance runs refuse a reduced gradient sample."""
        with pytest.raises(ConfigError) as excinfo:
            cfg.parse_config({"diagnostics": {"acceptance": True, "gradient_draws": 20}})
        assert excinfo.value.field_path == "diagnostics.gradient_draws"
        config = cfg.parse_config({"diagnostics": {"acceptance": True}})
        assert config.diagnostics.gradient_draws == 10_000


class TestLoadConfig:
    """Tests for reading config files."""

    def test_load(self, config_file, tmp_path):
        """A written config loads with its output directory."""
        config = cfg.load_config(config_file)
        assert config.output_dir == str(tmp_path / "study")

    def test_missing_file(self, tmp_path):
        """A missing file is a config error."""
        with pytest.raises(ConfigError) as excinfo:
            cfg.load_config(tmp_path / "absent.json")
        assert excinfo.value.field_path == "<file>"

    def test_invalid_json(self, tmp_path):
        """Malformed JSON is a config error."""
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            cfg.load_config(path)

    def test_hash_tracks_content(self, minimal_config):
        """Equal configs hash equally; any change moves the hash."""
        a = cfg.config_hash(cfg.parse_config(minimal_config))
        b = cfg.config_hash(cfg.parse_config(json.loads(json.dumps(minimal_config))))
        c = cfg.config_hash(cfg.parse_config({**minimal_config, "T": 101}))
        assert a == b
        assert a != c


class TestSeeds:
    """Tests for seed derivation."""

    def test_resolve_derived(self):
        """n_seeds distinct seeds, identical on every call."""
        seeds = cfg.SeedConfig(base_seed=3, n_seeds=5)
        assert seeds.resolve() == seeds.resolve()
        assert len(set(seeds.resolve())) == 5

    def test_resolve_explicit(self):
        """An explicit list is used as given."""
        assert cfg.SeedConfig(seeds=[9, 2, 5]).resolve() == [9, 2, 5]

    def test_purposes_are_independent(self):
        """Different purposes and indices give different seeds."""
        assert seeding.derive_seed(0, "train", 0) != seeding.derive_seed(0, "coupling", 0)
        assert seeding.derive_seed(0, "train", 0) != seeding.derive_seed(0, "train", 1)
        assert seeding.derive_seed(0, "train", 4) == seeding.derive_seeds(0, "train", 5)[4]

    def test_unknown_purpose(self):
        """Purposes come from a fixed table."""
        with pytest.raises(KeyError):
            seeding.derive_seed(0, "lottery")

    def test_generator_reproducible(self):
        """Same seed, same draws."""
        assert seeding.generator(42).random() == seeding.generator(42).random()
