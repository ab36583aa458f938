"""Shared fixtures: deterministic key material and a scenario runner."""

import pytest

from tset import crypto
from tset.rng import ByteStream
from tset.scenario import ScenarioConfig, build_world
from tset.simnet import Simulation
from tset.tokens import Token


class KeyFixture:
    """Root key, two entity keys, and their certificates, all from seed 42."""

    def __init__(self):
        rng = ByteStream(42)
        self.root_key = crypto.new_signing_key(rng.fork("root"))
        self.root_public = self.root_key.public_key().public_bytes_raw()
        self.customer_key = crypto.new_signing_key(rng.fork("customer"))
        self.merchant_key = crypto.new_signing_key(rng.fork("merchant"))
        self.cert_customer = crypto.issue_certificate(
            self.root_key, "C0",
            self.customer_key.public_key().public_bytes_raw())
        self.cert_merchant = crypto.issue_certificate(
            self.root_key, "M0",
            self.merchant_key.public_key().public_bytes_raw())


@pytest.fixture(scope="session")
def keyset() -> KeyFixture:
    return KeyFixture()


@pytest.fixture()
def sample_token(keyset) -> Token:
    return Token(15000, keyset.cert_customer, keyset.cert_merchant,
                 bytes(range(32)), 7)


def run_dict(data: dict):
    """Build and run a scenario given as a plain dict; returns the RunResult."""
    config = ScenarioConfig.from_dict(data)
    return Simulation(build_world(config)).run()


BASIC_SCENARIO = {
    "seed": 7,
    "customers": [{"balance": 100000,
                   "purchases": [{"merchant": 0, "product": "widget",
                                  "quantity": 1}]}],
    "merchants": [{"catalog": {"widget": 15000}}],
}


def basic_scenario(**overrides) -> dict:
    data = {k: (dict(v) if isinstance(v, dict) else list(v)
                if isinstance(v, list) else v)
            for k, v in BASIC_SCENARIO.items()}
    data["customers"] = [dict(c) for c in BASIC_SCENARIO["customers"]]
    data["merchants"] = [dict(m) for m in BASIC_SCENARIO["merchants"]]
    data.update(overrides)
    return data
