"""Self- and cross-domain attention: score rows are distributions, and cross
attention reduces to self attention when both domains see the same image.

Run: python demos/02_attention_collapse.py
"""
import torch

from treeadapt import losses as L
from treeadapt.decoder import CountingModel, ModelConfig

torch.manual_seed(0)
model = CountingModel(ModelConfig(img_size=64)).eval()
src, tgt = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)

with torch.no_grad():
    out = model(src, tgt)
for scale in (4, 3, 2):
    m = out["score_st"][scale]
    print(f"scale {scale}: score map {tuple(m.shape)}, row sums in "
          f"[{m.sum(-1).min():.6f}, {m.sum(-1).max():.6f}]")
h = L.hcdfa_loss(out["score_st"], out["score_s"], out["score_t"]).item()
print(f"different images: alignment loss {h:.3e}")

with torch.no_grad():
    same = model(tgt, tgt.clone())
h = L.hcdfa_loss(same["score_st"], same["score_s"], same["score_t"]).item()
gap = (same["T_st"] - same["T_t"]).abs().max().item()
print(f"identical images: alignment loss {h:.3e}, max |T_st - T_t| {gap:.3e}")
