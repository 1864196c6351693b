def ansatz(n, layers):
    """Hardware-efficient ansatz with symbolic angles."""
    theta = ParameterVector("t", n * layers)
    qc = QuantumCircuit(n)
    for layer in range(layers):
        for q in range(n):
            qc.ry(theta[layer * n + q], q)
        for q in range(n - 1):
            qc.cz(q, q + 1)
    return qc, theta
