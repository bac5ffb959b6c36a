"""The transport term measures how far predicted mass has to move.

Run: python demos/03_transport_loss.py
"""
import torch

from treeadapt import losses as L

n = 32
a = torch.zeros(1, n, n, dtype=torch.float64)
a[0, 10, 0] = 1
print("two unit spikes on a 32 x 32 grid, coordinates divided by the width")
for shift in (0, 4, 8, 16):
    b = torch.zeros_like(a)
    b[0, 10, shift] = 1
    v = L.ot_loss(a, b, L.OtConfig(epsilon=1e-3, iterations=200)).item()
    print(f"  shift {shift:2d} px: ot {v:.5f}   squared distance {(shift / n) ** 2:.5f}")

# Counting alone ignores where the mass sits; transport and TV do not.
b = torch.zeros_like(a)
b[0, 10, 16] = 1
print(f"count loss {L.count_loss(a, b).item():.3f}, tv loss {L.tv_loss(a, b).item():.3f}")
