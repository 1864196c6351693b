# expect: basic
# fixed rotation angles are plain gates, not a variational pattern
def fixed_rotation():
    qc = QuantumCircuit(1)
    qc.rx(0.5, 0)
    qc.ry(1.25, 0)
    return qc
