# expect: intermediate
def conditional_flip(flip):
    qc = QuantumCircuit(1, 1)
    if flip:
        qc.x(0)
    qc.measure_all()
    return qc
