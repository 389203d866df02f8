"""Independent reference implementations used only by tests."""

import math

import numpy as np


def qmul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def qaxis(axis, angle):
    s = math.sin(angle / 2)
    return (math.cos(angle / 2), axis[0] * s, axis[1] * s, axis[2] * s)


def q_from_zyx(psi, theta, phi):
    return qmul(qmul(qaxis((0, 0, 1), psi), qaxis((0, 1, 0), theta)), qaxis((1, 0, 0), phi))


def qmat(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def qrotate(q, v):
    w, x, y, z = q
    vx, vy, vz = v
    # v' = v + 2w (r x v) + 2 r x (r x v)
    cx, cy, cz = y * vz - z * vy, z * vx - x * vz, x * vy - y * vx
    ddx, ddy, ddz = y * cz - z * cy, z * cx - x * cz, x * cy - y * cx
    return (vx + 2 * (w * cx + ddx), vy + 2 * (w * cy + ddy), vz + 2 * (w * cz + ddz))


def zyx_from_q(q):
    w, x, y, z = q
    psi = math.atan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    theta = math.asin(max(-1.0, min(1.0, 2 * (w * y - z * x))))
    phi = math.atan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    return psi, theta, phi


def quaternion_integrate(p0, e0, v_body, w_body, duration, dt=1e-5):
    """Integrate constant body velocities with a fine quaternion stepper."""
    q = q_from_zyx(*e0)
    px, py, pz = p0
    n = int(round(duration / dt))
    wx, wy, wz = w_body
    wn = math.sqrt(wx * wx + wy * wy + wz * wz)
    if wn > 0:
        dq = qaxis((wx / wn, wy / wn, wz / wn), wn * dt)
        half = qaxis((wx / wn, wy / wn, wz / wn), wn * dt / 2)
    else:
        dq = half = (1.0, 0.0, 0.0, 0.0)
    for _ in range(n):
        # position with mid-step attitude, attitude by exact body-frame increment
        qm = qmul(q, half)
        dx, dy, dz = qrotate(qm, v_body)
        px, py, pz = px + dx * dt, py + dy * dt, pz + dz * dt
        q = qmul(q, dq)
    return np.array([px, py, pz]), np.array(zyx_from_q(q))


def conv2d_naive(x, w, b, stride, pad):
    """Plain-loop 2-D convolution (cross-correlation), x: (C,H,W), w: (O,C,k,k)."""
    C, H, W = x.shape
    O, _, k, _ = w.shape
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = b[o]
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            ii = i * stride + di - pad
                            jj = j * stride + dj - pad
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += w[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def dense_naive(x, w, b):
    out = []
    for o in range(w.shape[0]):
        acc = b[o]
        for i in range(w.shape[1]):
            acc += w[o, i] * x[i]
        out.append(acc)
    return np.array(out)


def relu_naive(x):
    return np.where(x > 0, x, 0.0)
