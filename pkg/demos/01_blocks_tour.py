"""A tour of the three attention blocks on random feature maps.

Shows what each block looks like at initialisation (the gated paths start
closed), what the attention weights look like, and how the blocks sit in the
U-Net.

    python demos/01_blocks_tour.py
"""
import torch

from mscanet import CAB, MSEDA, PCBAM, NetworkConfig, build_mscanet
from mscanet.network import count_parameters, pcbam_resolutions

torch.manual_seed(0)
x = torch.randn(2, 16, 32, 32)

# MSEDA: two gated conv stages (lambda1, lambda2 start at 0), an embedding,
# then multi-head dilated window attention.
mseda = MSEDA(16)
print("MSEDA")
print("  pre-embedding == input at init:", torch.equal(mseda.pre_embedding(x), x))
print("  window sizes per head:", mseda.attn.receptive_fields)
print("  attention width (rounded to a multiple of 3 heads):", mseda.attn.attn_channels)
weights = mseda.attn.attention_weights(torch.randn(1, 16, 8, 8))
print("  head 0 weights, first query:", [round(v, 3) for v in weights[0][0, :, 0].tolist()])
print("  (a corner query: only 4 of its 9 taps are inside the image)")

# PCBAM: channel, spatial and position attention. PAM's alpha starts at 0.
pcbam = PCBAM(16)
print("PCBAM")
print("  PAM is the identity at init:", torch.equal(pcbam.pam(x), x))
_, s = pcbam.pam(torch.randn(1, 16, 6, 6), return_attention=True)
print("  PAM attention matrix:", tuple(s.shape), "rows sum to", s.sum(-1).mean().item())

# CAB: gamma starts at 0, so the aggregated features equal Y.
cab = CAB(16)
y, ca = cab.aggregate(x)
print("CAB")
print("  CA == Y at init:", torch.equal(y, ca))

# The network: MSEDA after encoder stages, PCBAM on the deep skips, CAB in the decoder.
cfg = NetworkConfig()
net = build_mscanet(cfg, seed=0)
print("network (default config)")
print("  channels per level:", cfg.channels)
print("  PCBAM skip levels at 256x256 input:", pcbam_resolutions(cfg, 256, 256))
print("  parameters:", count_parameters(net))
with torch.no_grad():
    out = net(torch.rand(1, 1, 64, 64))
print("  output range on a random image: [%.3f, %.3f]" % (out.min(), out.max()))
