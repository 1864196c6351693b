from qiskit import QuantumCircuit
from qiskit.circuit import ParameterVector


def ansatz(n, reps):
    """Layers of RY rotations and a CZ ladder with symbolic angles."""
    theta = ParameterVector("t", n * reps)
    qc = QuantumCircuit(n)
    for r in range(reps):
        for q in range(n):
            qc.ry(theta[r * n + q], q)
        for q in range(n - 1):
            qc.cz(q, q + 1)
    return qc


def entangled_pair():
    # same circuit as states.bell_pair with other names
    circuit = QuantumCircuit(2, 2)
    circuit.h(0)
    circuit.cx(0, 1)
    circuit.measure([0, 1], [0, 1])
    return circuit


def wait_forever(backend):
    job = backend.run(QuantumCircuit(1))
    while True:
        job.status()


def untested():
    return QuantumCircuit(3)
