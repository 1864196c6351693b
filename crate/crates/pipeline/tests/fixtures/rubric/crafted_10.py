# expect: advanced
def long_workflow():
    qc = QuantumCircuit(2)
    qc.h(0)
    qc.h(1)
    qc.t(0)
    qc.t(1)
    qc.s(0)
    qc.s(1)
    qc.x(0)
    qc.x(1)
    qc.y(0)
    qc.y(1)
    qc.z(0)
    qc.z(1)
    qc.h(0)
    qc.h(1)
    qc.sx(0)
    qc.sx(1)
    qc.tdg(0)
    qc.tdg(1)
    qc.sdg(0)
    qc.sdg(1)
    qc.h(0)
    qc.h(1)
    return qc
