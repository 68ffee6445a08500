use nalgebra::DMatrix;

use crate::network::NetworkCase;

/// Dense nodal conductance and susceptance matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceView {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// Assemble G and B from the branch pi models. With tap ratio t at the from
/// end the from-side self term is scaled by 1/t^2 and the mutual term by 1/t.
pub fn build_admittance(case: &NetworkCase) -> AdmittanceView {
    let n = case.bus_count();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    for br in &case.branches {
        let (f, t) = (br.from, br.to);
        let inv_tap = 1.0 / br.tap;
        let inv_tap2 = inv_tap * inv_tap;
        g[(f, f)] += br.g * inv_tap2;
        g[(t, t)] += br.g;
        g[(f, t)] -= br.g * inv_tap;
        g[(t, f)] -= br.g * inv_tap;
        b[(f, f)] += (br.b + br.b_sh) * inv_tap2;
        b[(t, t)] += br.b + br.b_sh;
        b[(f, t)] -= br.b * inv_tap;
        b[(t, f)] -= br.b * inv_tap;
    }
    AdmittanceView { g, b }
}
