def entangle_all(m):
    out = QuantumCircuit(m)
    out.h(0)
    for j in range(m - 1):
        out.cx(j, j + 1)
    return out
