def ghz(n):
    qc = QuantumCircuit(n)
    qc.h(0)
    # chain of CNOTs
    for i in range(n - 1):
        qc.cx(i,  i + 1)

    return qc
