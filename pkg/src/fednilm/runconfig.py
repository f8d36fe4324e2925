"""Run configuration: INI files with typed sections plus --set overrides.

Every training-table hyperparameter is a default here, so a bare config file
reproduces the reference setup; any key can be overridden per run.  Seeds
are always explicit — nothing reads ambient entropy.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .federation import FederationConfig
from .model import ModelConfig


class ConfigError(Exception):
    """Malformed or incomplete run configuration."""


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.replace(" ", "").split(",") if part)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# section -> key -> (parser, default-as-string)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "output_dir": (str, "out"),
        "checkpoint": (str, ""),
    },
    "data": {
        "raw_dir": (str, "raw"),
        "dataset_dir": (str, "windows"),
        "train_stride": (int, "63"),
        "eval_stride": (int, "126"),
    },
    "model": {
        "window_len": (int, "126"),
        "appliance_count": (int, "3"),
        "encoder_channels": (_int_tuple, "64,128,256"),
        "downsample_factors": (_int_tuple, "2,5"),
        "branch_channels": (int, "64"),
        "decoder_channels": (int, "64"),
    },
    "train": {
        "global_rounds": (int, "10"),
        "local_epochs": (int, "10"),
        "local_batch": (int, "32"),
        "global_batch": (int, "32"),
        "learning_rate": (float, "1e-4"),
        "momentum": (float, "0.5"),
        "dropout": (float, "0.1"),
    },
    "seeds": {
        "global": (int, "1"),
        "clients": (_int_tuple, "11,12,13"),
    },
    "split": {
        "mode": (str, "seen"),
        "case": (int, "1"),
    },
    "synth": {
        "seed": (int, "1"),
        "households": (int, "3"),
        "days": (float, "14"),
        "noise_sigma": (float, "15.0"),
    },
    "wire": {
        "host": (str, "127.0.0.1"),
        "port": (int, "7171"),
        "n_clients": (int, "3"),
        "client_id": (int, "0"),
        "timeout_s": (float, "120"),
    },
}


@dataclass
class RunConfig:
    """Typed view over the parsed configuration."""

    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @classmethod
    def load(cls, path: str | None, overrides: list[str] = ()) -> "RunConfig":
        parser = configparser.ConfigParser()
        if path:
            try:
                with open(path, "r", encoding="utf-8") as fh:
                    parser.read_file(fh)
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except configparser.Error as exc:
                raise ConfigError(f"config parse error: {exc}") from None
        raw: dict[str, dict[str, str]] = {
            section: dict(defaults_to_text(section)) for section in SCHEMA
        }
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, value in parser[section].items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                raw[section][key] = value
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            target, value = item.split("=", 1)
            section, key = target.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown override target {target!r}")
            raw[section][key] = value
        values: dict[str, dict[str, object]] = {}
        for section, keys in SCHEMA.items():
            values[section] = {}
            for key, (parse, _) in keys.items():
                text = raw[section][key]
                try:
                    values[section][key] = parse(text)
                except (ValueError, TypeError):
                    raise ConfigError(
                        f"bad value for {section}.{key}: {text!r}"
                    ) from None
        return cls(values)

    # -- assembled component configs ---------------------------------------

    def model_config(self, dropout: float | None = None, init_seed: int | None = None) -> ModelConfig:
        m = self["model"]
        return ModelConfig(
            window_len=m["window_len"],
            appliance_count=m["appliance_count"],
            encoder_channels=tuple(m["encoder_channels"]),
            downsample_factors=tuple(m["downsample_factors"]),
            branch_channels=m["branch_channels"],
            decoder_channels=m["decoder_channels"],
            dropout_p=self["train"]["dropout"] if dropout is None else dropout,
            init_seed=self["seeds"]["global"] if init_seed is None else init_seed,
        )

    def federation_config(self, n_clients: int) -> FederationConfig:
        t = self["train"]
        seeds = tuple(self["seeds"]["clients"])
        if len(seeds) < n_clients:
            raise ConfigError(
                f"seeds.clients lists {len(seeds)} seeds but {n_clients} clients joined"
            )
        return FederationConfig(
            n_clients=n_clients,
            global_rounds=t["global_rounds"],
            local_epochs=t["local_epochs"],
            local_batch=t["local_batch"],
            global_batch=t["global_batch"],
            eta=t["learning_rate"],
            rho=t["momentum"],
            dropout=t["dropout"],
            global_seed=self["seeds"]["global"],
            client_seeds=seeds[:n_clients],
        )


def defaults_to_text(section: str):
    for key, (_, default) in SCHEMA[section].items():
        yield key, default
