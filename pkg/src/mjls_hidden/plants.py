"""The two benchmark plants used in the numerical studies."""

import numpy as np

from .model import MjlsModel

EXAMPLE1_MU_R = (0.6942, 0.3058)


def example1() -> MjlsModel:
    """Two-mode, four-state plant with i.i.d. modes."""
    A1 = [[0.7017, -1.227, 0.3931, -0.6368],
          [-0.4876, -0.6699, -1.7073, -1.0026],
          [1.8625, 1.3409, 0.2279, -0.1856],
          [1.1069, 0.3881, 0.6856, -1.0540]]
    A2 = [[-0.0715, -0.5420, 0.6716, 0.6250],
          [0.2792, 1.6342, -0.5081, -1.0473],
          [1.3733, 0.8252, 0.8564, 1.5357],
          [0.1798, 0.2308, 0.2685, 0.4344]]
    B = np.vstack([np.eye(2), np.zeros((2, 2))])
    C = np.vstack([np.eye(4), np.zeros((2, 4))])
    D = np.vstack([np.zeros((4, 2)), np.eye(2)])
    E = np.eye(4)
    P = [[0.6942, 0.3058], [0.6942, 0.3058]]
    return MjlsModel(A=[A1, A2], B=[B, B], C=[C, C], D=[D, D], E=[E, E], P=P, name="example1")


def example2() -> MjlsModel:
    """Two-mode, two-state plant that is not mean square stable open loop."""
    return MjlsModel(
        A=[[[-0.6, -0.4], [-0.6, -0.4]], [[-0.8, 0.4], [0.8, 0.2]]],
        B=[[[-0.3], [-0.2]], [[-0.2], [-0.3]]],
        C=[[[0.4, 0.2]], [[0.1, 0.5]]],
        D=[[[0.1]], [[-0.3]]],
        E=[[[-0.3], [-0.3]], [[-0.2], [-0.1]]],
        P=[[0.1, 0.9], [0.7, 0.3]],
        name="example2",
    )


BUILTIN = {"example1": example1, "ex1": example1, "example2": example2, "ex2": example2}
