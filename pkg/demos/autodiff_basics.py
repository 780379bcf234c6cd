"""A tour of the tensor library: build a graph, backprop, sanity-check."""

import numpy as np

import fedhar.tensor as T
from fedhar.tensor import Tensor, backward

# a small expression: z = sum(tanh(x @ w + b) * y)
x = Tensor(np.array([[1.0, -2.0], [0.5, 0.25]]), requires_grad=True)
w = Tensor(np.array([[0.3], [-0.7]]), requires_grad=True)
b = Tensor(np.array([0.1]), requires_grad=True)
y = Tensor(np.array([[2.0], [-1.0]]))

z = T.sum64(T.mul(T.tanh(T.add(T.matmul(x, w), b)), y))
backward(z)
print("z          =", z.data.item())
print("dz/dw      =", w.grad.ravel())
print("dz/db      =", b.grad.ravel())

# the same derivative by central differences
h = 1e-6
fd = []
for i in range(2):
    w.data[i, 0] += h
    up = T.sum64(T.mul(T.tanh(T.add(T.matmul(x, w), b)), y)).data.item()
    w.data[i, 0] -= 2 * h
    down = T.sum64(T.mul(T.tanh(T.add(T.matmul(x, w), b)), y)).data.item()
    w.data[i, 0] += h
    fd.append((up - down) / (2 * h))
print("dz/dw (fd) =", np.array(fd))

# gradients accumulate until cleared: two backward passes double them
x.grad = None
z2 = T.sum64(T.mul(x, x))
backward(z2)
once = x.grad.copy()
backward(z2)
print("accumulation: second backward doubles the gradient:",
      np.allclose(x.grad, 2 * once))

# one Adam step moves each weight by roughly the learning rate,
# regardless of the raw gradient scale
opt = T.Adam()
before = w.data.copy()
w.grad = np.array([[1e-3], [-40.0]])
opt.step({"w": w}, lr=0.05)
print("adam step sizes:", np.abs(w.data - before).ravel(), "(lr = 0.05)")
