import json

import pytest

from galrec.gradcheck import GradientReport, gradient_check, parameter_group, reference_config


def cheap(**kw):
    base = dict(d1=4, d2=4, num_heads=1, d_ff=8, synth_users=12, synth_items=6)
    base.update(kw)
    return reference_config(**base)


@pytest.fixture(scope="module")
def healthy():
    return gradient_check(cheap())


class TestGradientCheck:
    def test_healthy_passes(self, healthy):
        assert healthy.passed and healthy.max_error <= 1e-4
        assert set(healthy.errors) == {"token_embeddings", "positional_embeddings", "block0.attention",
                                       "block0.norm", "block0.feedforward", "mapper"}

    def test_momentum_has_zero_gradient(self, healthy):
        assert healthy.momentum and all(v == 0.0 for v in healthy.momentum.values())

    def test_fault_injection_detected(self):
        rep = gradient_check(cheap(), corrupt_attention=1.5)
        assert rep.errors["block0.attention"] > 1e-2
        assert not rep.passed
        assert rep.errors["mapper"] <= 1e-4

    def test_zero_parameter_model(self):
        rep = gradient_check(cheap(num_layers=0), freeze=True)
        assert rep.errors == {} and rep.momentum == {} and rep.passed

    def test_requires_double(self):
        with pytest.raises(ValueError):
            gradient_check(cheap(dtype="float32"))

    def test_report_json(self, healthy):
        obj = json.loads(healthy.to_json())
        assert obj["passed"] is True and set(obj["groups"]) == set(healthy.errors)
        assert len(healthy.lines()) == len(healthy.errors) + len(healthy.momentum)

    def test_group_labels(self):
        assert parameter_group("encoder.blocks.0.wq.weight") == "block0.attention"
        assert parameter_group("encoder.blocks.1.ff2.bias") == "block1.feedforward"
        assert parameter_group("mapper.weight") == "mapper"
        assert GradientReport(momentum={"x": 1e-30}).passed is False
