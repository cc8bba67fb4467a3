import pytest
import torch

from speechdst import (ByteTokenizer, Connector, ConnectorConfig, LmSpec,
                       SpeechDstModel, ToyCausalLM, ToyEncoder)


def tiny_lm(seed=0, embed_dim=32, layers=2, heads=4, max_context=512):
    torch.manual_seed(seed)
    return ToyCausalLM(LmSpec(embed_dim=embed_dim, layers=layers, heads=heads,
                              max_context=max_context))


def tiny_model(seed=0, lm_dim=32):
    torch.manual_seed(seed)
    enc = ToyEncoder(n_symbols=128, output_dim=16, expansion=4)
    lm = ToyCausalLM(LmSpec(embed_dim=lm_dim, layers=2, heads=4, max_context=512))
    con = Connector(ConnectorConfig(encoder_dim=16, lm_dim=lm_dim, stack_factor=4,
                                    hidden=32, heads=4, ffn_dim=64, layers=1,
                                    max_stacked_len=128))
    return SpeechDstModel(enc, con, lm, ByteTokenizer())


@pytest.fixture
def tok():
    return ByteTokenizer()
