"""One training exchange of the split U-Net, message by message.

The client runs the first conv block and the output head, the server runs the
trunk. Only activations and their gradients cross the boundary; masks stay on
the client. The split gradients match the monolithic network exactly.

    python demos/split_exchange.py
"""

import numpy as np

from qasplitfed import nn, split
from qasplitfed.params import ParamVector

net = nn.unet((1, 32, 32))
part = split.default_split(net)
rng = np.random.default_rng(0)
client, server = part.init_params(rng)
fe, be = part.split_params(client)
print(f"client front-end {len(part.fe)} layers, server trunk {len(part.server)} layers, "
      f"client back-end {len(part.be)} layers")
print(f"client parameters {client.flat().size}, server parameters {server.flat().size}")

x = rng.random((4, 1, 32, 32))
y = rng.integers(0, net.num_classes, (4, 32, 32))
rnd = split.Round(0, 1, 0, 1)

m1, c_fe = split.client_forward_fe(part, fe, x, rnd)
m2, c_srv = split.server_forward(part, server, m1)
loss, pred, per_sample, c_be = split.client_forward_be(part, be, m2, y)
g_be, m3 = split.client_backward_be(part, be, c_be)
g_srv, m4 = split.server_backward(part, server, c_srv, m3)
g_fe = split.client_backward_fe(part, fe, c_fe, m4)

for m in (m1, m2, m3, m4):
    print(f"{m.kind:>18}: {len(split.encode_message(m)):7d} bytes, tensors {list(m.payload)}")
print(f"loss {loss:.6f}, per-sample {np.round(per_sample, 4)}")

full_net, full = split.assemble_monolithic(part, client, server)
out, cache = nn.forward(full_net, full, x)
ref_loss, g = nn.cross_entropy_loss(out, y)
ref, _ = nn.backward(full_net, full, cache, g)
grads = ParamVector.merge(g_fe, g_srv, g_be, order=net.param_names())
print(f"monolithic loss equal: {loss == ref_loss}, "
      f"max gradient difference {np.abs(grads.flat() - ref.flat()).max():.1e}")
