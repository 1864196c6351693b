# expect: intermediate
def long_single_qubit_chain():
    qc = QuantumCircuit(1)
    qc.h(0)
    qc.t(0)
    qc.h(0)
    qc.s(0)
    qc.h(0)
    qc.t(0)
    qc.h(0)
    qc.z(0)
    qc.h(0)
    qc.x(0)
    return qc
