//! Closed-form Schrödinger bridges between two Gaussians.
//!
//! With `ε = 0` the bridge is the Bures–Wasserstein geodesic and the cost is
//! the squared 2-Wasserstein distance. With `ε > 0` the endpoint coupling is
//! the entropic optimal one, with cross-covariance
//! `C = ½(Σa^½ D Σa^-½ − εI)`, `D = (4 Σa^½ Σb Σa^½ + ε² I)^½`, and the
//! marginals are those of the Brownian bridge mixture over that coupling.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ScalpelError};
use crate::gmm::GaussianComponent;
use crate::linalg::{check_spd, sym_inv_sqrt, sym_sqrt, symmetrize, trace_sqrt, GaussianFactor};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub epsilon: f64,
}

impl BridgeConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(ScalpelError::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self { epsilon })
    }
}

fn check_pair(a: &GaussianComponent, b: &GaussianComponent) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(ScalpelError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    check_spd(&a.covariance)?;
    check_spd(&b.covariance)
}

fn same_gaussian(a: &GaussianComponent, b: &GaussianComponent) -> bool {
    a.mean == b.mean && a.covariance == b.covariance
}

/// Squared Bures–Wasserstein distance.
fn bures_sq(a: &GaussianComponent, b: &GaussianComponent) -> f64 {
    if same_gaussian(a, b) {
        return 0.0;
    }
    let sa = sym_sqrt(&a.covariance);
    let cross = trace_sqrt(&(&sa * &b.covariance * &sa));
    let v = (&a.mean - &b.mean).norm_squared() + a.covariance.trace() + b.covariance.trace() - 2.0 * cross;
    v.max(0.0)
}

/// Cross-covariance of the entropic optimal coupling.
fn entropic_cross(a: &DMatrix<f64>, b: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    let d = a.nrows();
    let sa = sym_sqrt(a);
    let sai = sym_inv_sqrt(a);
    let inner = symmetrize(&(&sa * b * &sa)) * 4.0 + DMatrix::identity(d, d) * (eps * eps);
    let dm = sym_sqrt(&inner);
    (&sa * dm * &sai - DMatrix::identity(d, d) * eps) * 0.5
}

/// `2ε · KL(π ‖ ρa ⊗ N(x_a, εI))` for the entropic coupling `π`.
fn entropic_cost(a: &GaussianComponent, b: &GaussianComponent, c: &DMatrix<f64>, eps: f64) -> Result<f64> {
    let d = a.dim();
    let n = 2 * d;
    let mut s1 = DMatrix::zeros(n, n);
    s1.view_mut((0, 0), (d, d)).copy_from(&a.covariance);
    s1.view_mut((0, d), (d, d)).copy_from(c);
    s1.view_mut((d, 0), (d, d)).copy_from(&c.transpose());
    s1.view_mut((d, d), (d, d)).copy_from(&b.covariance);
    let mut s2 = DMatrix::zeros(n, n);
    for (r, cc) in [(0, 0), (0, d), (d, 0), (d, d)] {
        s2.view_mut((r, cc), (d, d)).copy_from(&a.covariance);
    }
    for i in d..n {
        s2[(i, i)] += eps;
    }
    let s1 = symmetrize(&s1);
    let s2 = symmetrize(&s2);
    let ch1 = s1.clone().cholesky().ok_or(ScalpelError::NotPositiveDefinite)?;
    let ch2 = s2.clone().cholesky().ok_or(ScalpelError::NotPositiveDefinite)?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut dm = DVector::zeros(n);
    for i in 0..d {
        dm[d + i] = b.mean[i] - a.mean[i];
    }
    let trace = ch2.solve(&s1).trace();
    let maha = dm.dot(&ch2.solve(&dm));
    let kl = 0.5 * (trace + maha - n as f64 + logdet(&ch2.l()) - logdet(&ch1.l()));
    Ok((2.0 * eps * kl).max(0.0))
}

/// Transport cost between two Gaussians.
pub fn cost(a: &GaussianComponent, b: &GaussianComponent, cfg: &BridgeConfig) -> Result<f64> {
    check_pair(a, b)?;
    if cfg.epsilon == 0.0 {
        return Ok(bures_sq(a, b));
    }
    let c = entropic_cross(&a.covariance, &b.covariance, cfg.epsilon);
    entropic_cost(a, b, &c, cfg.epsilon)
}

#[derive(Debug, Clone)]
pub struct GaussianBridge {
    a: GaussianComponent,
    b: GaussianComponent,
    epsilon: f64,
    cost: f64,
    /// `Cov(x_a, x_b)` under the optimal coupling.
    cross: DMatrix<f64>,
    /// Optimal linear map (`ε = 0` only).
    map: Option<DMatrix<f64>>,
}

impl GaussianBridge {
    pub fn new(a: &GaussianComponent, b: &GaussianComponent, cfg: &BridgeConfig) -> Result<Self> {
        check_pair(a, b)?;
        let eps = cfg.epsilon;
        let d = a.dim();
        let (cross, map, cost) = if eps == 0.0 {
            let sa = sym_sqrt(&a.covariance);
            let sai = sym_inv_sqrt(&a.covariance);
            let mid = sym_sqrt(&(&sa * &b.covariance * &sa));
            let t = if same_gaussian(a, b) {
                DMatrix::identity(d, d)
            } else {
                symmetrize(&(&sai * mid * &sai))
            };
            (&a.covariance * &t, Some(t), bures_sq(a, b))
        } else {
            let c = entropic_cross(&a.covariance, &b.covariance, eps);
            let j = entropic_cost(a, b, &c, eps)?;
            (c, None, j)
        };
        Ok(Self {
            a: a.clone(),
            b: b.clone(),
            epsilon: eps,
            cost,
            cross,
            map,
        })
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn endpoints(&self) -> (&GaussianComponent, &GaussianComponent) {
        (&self.a, &self.b)
    }

    /// Optimal transport map `T` with `T Σa T = Σb` (`ε = 0` only).
    pub fn transport_map(&self) -> Option<&DMatrix<f64>> {
        self.map.as_ref()
    }

    pub fn cross_covariance(&self) -> &DMatrix<f64> {
        &self.cross
    }

    fn check_time(t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ScalpelError::TimeOutOfRange(t));
        }
        Ok(())
    }

    fn mean_at(&self, t: f64) -> DVector<f64> {
        &self.a.mean * (1.0 - t) + &self.b.mean * t
    }

    fn cov_at(&self, t: f64) -> DMatrix<f64> {
        let d = self.a.dim();
        let s = 1.0 - t;
        let cc = &self.cross + self.cross.transpose();
        let mut cov = &self.a.covariance * (s * s) + &self.b.covariance * (t * t) + cc * (t * s);
        if self.epsilon > 0.0 {
            cov += DMatrix::identity(d, d) * (self.epsilon * t * s);
        }
        symmetrize(&cov)
    }

    /// Time-`t` marginal of the bridge.
    pub fn marginal(&self, t: f64) -> Result<GaussianComponent> {
        Self::check_time(t)?;
        if t == 0.0 {
            return Ok(self.a.clone());
        }
        if t == 1.0 {
            return Ok(self.b.clone());
        }
        Ok(GaussianComponent::new(self.mean_at(t), self.cov_at(t), 1.0))
    }

    pub fn marginal_log_pdf(&self, z: &[f64], t: f64) -> Result<f64> {
        let m = self.marginal(t)?;
        if z.len() != m.dim() {
            return Err(ScalpelError::DimensionMismatch {
                expected: m.dim(),
                got: z.len(),
            });
        }
        Ok(GaussianFactor::new(&m.mean, &m.covariance)?.log_pdf(z))
    }

    /// Velocity field of the bridge at `(z, t)`.
    pub fn drift(&self, z: &[f64], t: f64) -> Result<DVector<f64>> {
        let d = self.a.dim();
        if z.len() != d {
            return Err(ScalpelError::DimensionMismatch { expected: d, got: z.len() });
        }
        if t == 1.0 {
            return Err(ScalpelError::TerminalDrift);
        }
        Self::check_time(t)?;
        let z = DVector::from_column_slice(z);
        let dmu = &self.b.mean - &self.a.mean;
        if let Some(map) = &self.map {
            // x_t = m_t + M_t (x_0 − μa) with M_t = (1−t)I + tT
            let mt = DMatrix::identity(d, d) * (1.0 - t) + map * t;
            let off = &z - self.mean_at(t);
            let x0 = mt.lu().solve(&off).ok_or(ScalpelError::NotPositiveDefinite)?;
            return Ok((map - DMatrix::identity(d, d)) * x0 + dmu);
        }
        // E[x_b | x_t = z] − z, spread over the remaining time
        let cov = self.cov_at(t);
        let k = self.cross.transpose() * (1.0 - t) + &self.b.covariance * t;
        let off = &z - self.mean_at(t);
        let sol = cov.cholesky().ok_or(ScalpelError::NotPositiveDefinite)?.solve(&off);
        let target = &self.b.mean + k * sol;
        Ok((target - z) / (1.0 - t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn g1(mu: f64, var: f64) -> GaussianComponent {
        GaussianComponent::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var), 1.0)
    }

    fn random_spd(rng: &mut rng::Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        symmetrize(&(&a * a.transpose() + DMatrix::identity(d, d) * 0.2))
    }

    fn random_component(rng: &mut rng::Rng, d: usize) -> GaussianComponent {
        let mean = DVector::from_fn(d, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        GaussianComponent::new(mean, random_spd(rng, d), 1.0)
    }

    const ZERO: BridgeConfig = BridgeConfig { epsilon: 0.0 };

    #[test]
    fn cost_trivial_cases() {
        let mut rng = rng::stream(1, "bridge");
        let a = random_component(&mut rng, 4);
        assert_eq!(cost(&a, &a, &ZERO).unwrap(), 0.0);
        let mut b = a.clone();
        let delta = DVector::from_row_slice(&[0.5, -1.0, 2.0, 0.0]);
        b.mean += &delta;
        assert!((cost(&a, &b, &ZERO).unwrap() - delta.norm_squared()).abs() < 1e-9);
        let c = cost(&g1(1.0, 4.0), &g1(-0.5, 0.25), &ZERO).unwrap();
        assert!((c - (1.5f64.powi(2) + 1.5f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn cost_diagonal_oracle() {
        // commuting covariances: Σ (√a_i − √b_i)²
        let a = GaussianComponent::new(DVector::zeros(3), DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 4.0, 9.0])), 1.0);
        let b = GaussianComponent::new(DVector::zeros(3), DMatrix::from_diagonal(&DVector::from_row_slice(&[4.0, 1.0, 0.25])), 1.0);
        let expected = 1.0 + 1.0 + 2.5f64.powi(2);
        assert!((cost(&a, &b, &ZERO).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn non_spd_rejected() {
        let bad = GaussianComponent::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), 1.0);
        let good = GaussianComponent::new(DVector::zeros(2), DMatrix::identity(2, 2), 1.0);
        let err = cost(&bad, &good, &ZERO).unwrap_err();
        assert_eq!(err.to_string(), "covariance not positive definite");
    }

    #[test]
    fn marginal_endpoints_and_translation() {
        let mut rng = rng::stream(2, "bridge");
        let a = random_component(&mut rng, 3);
        let b = random_component(&mut rng, 3);
        for eps in [0.0, 0.3] {
            let br = GaussianBridge::new(&a, &b, &BridgeConfig { epsilon: eps }).unwrap();
            assert_eq!(br.marginal(0.0).unwrap(), a);
            assert_eq!(br.marginal(1.0).unwrap(), b);
            // interior formula also approaches the endpoints
            let near = br.marginal(1.0 - 1e-12).unwrap();
            assert!((&near.covariance - &b.covariance).abs().max() < 1e-9);
            assert!(br.marginal(1.5).is_err());
            assert!(br.marginal(-0.1).is_err());
        }
        let mut c = a.clone();
        c.mean = DVector::from_row_slice(&[3.0, 3.0, 3.0]);
        let br = GaussianBridge::new(&a, &c, &ZERO).unwrap();
        let m = br.marginal(0.5).unwrap();
        assert!((&m.mean - (&a.mean + &c.mean) * 0.5).abs().max() < 1e-12);
        assert!((&m.covariance - &a.covariance).abs().max() < 1e-9);
    }

    #[test]
    fn map_pushes_forward_covariance() {
        let mut rng = rng::stream(3, "bridge");
        let a = random_component(&mut rng, 4);
        let b = random_component(&mut rng, 4);
        let br = GaussianBridge::new(&a, &b, &ZERO).unwrap();
        let t = br.transport_map().unwrap();
        assert!((t * &a.covariance * t - &b.covariance).abs().max() < 1e-8);
    }

    #[test]
    fn drift_translation_and_identity() {
        let mut rng = rng::stream(4, "bridge");
        let a = random_component(&mut rng, 3);
        let mut b = a.clone();
        b.mean = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        let br = GaussianBridge::new(&a, &b, &ZERO).unwrap();
        for t in [0.0, 0.3, 0.99] {
            let u = br.drift(&[5.0, 1.0, -7.0], t).unwrap();
            assert!((&u - (&b.mean - &a.mean)).abs().max() < 1e-9);
        }
        let same = GaussianBridge::new(&a, &a, &ZERO).unwrap();
        assert!(same.drift(&[0.1, 0.2, 0.3], 0.5).unwrap().abs().max() < 1e-12);
        assert!(matches!(br.drift(&[0.0; 3], 1.0), Err(ScalpelError::TerminalDrift)));
        assert_eq!(br.drift(&[0.0; 3], 1.0).unwrap_err().to_string(), "terminal-time drift undefined");
    }

    #[test]
    fn euler_path_follows_affine_map() {
        // oracle: T(z) = μ1 + (σ1/σ0)(z − μ0)
        let (mu0, mu1) = (0.5, -1.0);
        let br = GaussianBridge::new(&g1(mu0, 1.0), &g1(mu1, 4.0), &ZERO).unwrap();
        let steps = 10_000;
        let dt = 1.0 / steps as f64;
        let mut z = mu0 + 1.0;
        for s in 0..steps {
            z += br.drift(&[z], s as f64 * dt).unwrap()[0] * dt;
        }
        assert!((z - (mu1 + 2.0)).abs() < 1e-3, "{z}");
    }

    #[test]
    fn euler_translation_hits_target_mean() {
        let mut rng = rng::stream(5, "bridge");
        let a = random_component(&mut rng, 2);
        let mut b = a.clone();
        b.mean = DVector::from_row_slice(&[4.0, -3.0]);
        let br = GaussianBridge::new(&a, &b, &ZERO).unwrap();
        let gm = crate::gmm::Gmm::new(vec![a.clone()]).unwrap();
        let x = gm.sample(10_000, 6).unwrap();
        let steps = 20;
        let dt = 1.0 / steps as f64;
        let mut acc = DVector::zeros(2);
        for r in 0..x.nrows() {
            let mut z = x.row(r).transpose();
            for s in 0..steps {
                z += br.drift(z.as_slice(), s as f64 * dt).unwrap() * dt;
            }
            acc += z;
        }
        let mean = acc / x.nrows() as f64;
        for i in 0..2 {
            let se = (b.covariance[(i, i)] / x.nrows() as f64).sqrt();
            assert!((mean[i] - b.mean[i]).abs() < 3.0 * se);
        }
    }

    #[test]
    fn entropic_coupling_has_brownian_cross_precision() {
        // the EOT plan density is exp(−|x−y|²/2ε + f(x) + g(y)): cross precision −I/ε
        let mut rng = rng::stream(7, "bridge");
        let a = random_component(&mut rng, 3);
        let b = random_component(&mut rng, 3);
        let eps = 0.4;
        let br = GaussianBridge::new(&a, &b, &BridgeConfig { epsilon: eps }).unwrap();
        let c = br.cross_covariance();
        let mut joint = DMatrix::zeros(6, 6);
        joint.view_mut((0, 0), (3, 3)).copy_from(&a.covariance);
        joint.view_mut((0, 3), (3, 3)).copy_from(c);
        joint.view_mut((3, 0), (3, 3)).copy_from(&c.transpose());
        joint.view_mut((3, 3), (3, 3)).copy_from(&b.covariance);
        let prec = joint.try_inverse().unwrap();
        let block = prec.view((0, 3), (3, 3)).clone_owned();
        assert!((block + DMatrix::identity(3, 3) / eps).abs().max() < 1e-8);
    }

    #[test]
    fn entropic_cost_vanishes_into_bures() {
        let mut rng = rng::stream(8, "bridge");
        let a = random_component(&mut rng, 3);
        let b = random_component(&mut rng, 3);
        let w = cost(&a, &b, &ZERO).unwrap();
        let small = cost(&a, &b, &BridgeConfig { epsilon: 1e-5 }).unwrap();
        assert!((small - w).abs() < 1e-3 * w.max(1.0), "{small} vs {w}");
        assert!(cost(&a, &b, &BridgeConfig { epsilon: 0.5 }).unwrap() > 0.0);
    }

    #[test]
    fn entropic_cost_matches_kinetic_energy() {
        // oracle: 2ε·KL = ∫₀¹ E‖u_t‖² dt, by quadrature in 1-D
        let a = g1(0.3, 0.5);
        let b = g1(-1.2, 2.0);
        let eps = 0.7;
        let br = GaussianBridge::new(&a, &b, &BridgeConfig { epsilon: eps }).unwrap();
        let steps = 2000;
        let mut energy = 0.0;
        for s in 0..steps {
            let t = (s as f64 + 0.5) / steps as f64;
            let m = br.marginal(t).unwrap();
            let (mu, var) = (m.mean[0], m.covariance[(0, 0)]);
            // u is affine: u = α + β z, so E u² = (α + βμ)² + β² var
            let u0 = br.drift(&[0.0], t).unwrap()[0];
            let beta = br.drift(&[1.0], t).unwrap()[0] - u0;
            energy += ((u0 + beta * mu).powi(2) + beta * beta * var) / steps as f64;
        }
        assert!((energy - br.cost()).abs() < 1e-5 * energy.max(1.0), "{energy} vs {}", br.cost());
    }

    #[test]
    fn entropic_marginal_matches_sde_moments() {
        // oracle: the SDE dz = u dt + √ε dw started at N(μa, Σa) reaches N(μb, Σb)
        let a = g1(0.0, 1.0);
        let b = g1(2.0, 0.25);
        let eps = 0.5;
        let br = GaussianBridge::new(&a, &b, &BridgeConfig { epsilon: eps }).unwrap();
        let mut rng = rng::stream(9, "sde");
        let n = 4000;
        let steps = 200;
        let dt = 1.0 / steps as f64;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut z: f64 = rng.sample(StandardNormal);
            for s in 0..steps - 1 {
                let u = br.drift(&[z], s as f64 * dt).unwrap()[0];
                z += u * dt + (eps * dt).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            // last step lands on the conditional mean plus the residual noise
            let u = br.drift(&[z], 1.0 - dt).unwrap()[0];
            z += u * dt;
            s1 += z;
            s2 += z * z;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!((mean - 2.0).abs() < 0.05, "{mean}");
        assert!((var - 0.25).abs() < 0.05, "{var}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn cost_symmetric_and_separating(seed in 0u64..1_000_000, d in 1usize..7) {
            let mut rng = rng::stream(seed, "pair");
            let a = random_component(&mut rng, d);
            let b = random_component(&mut rng, d);
            let ab = cost(&a, &b, &ZERO).unwrap();
            let ba = cost(&b, &a, &ZERO).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
            prop_assert!(ab > 0.0);
            prop_assert_eq!(cost(&a, &a, &ZERO).unwrap(), 0.0);
            let mut c = a.clone();
            c.mean[0] += 1e-3;
            prop_assert!(cost(&a, &c, &ZERO).unwrap() > 0.0);
        }

        #[test]
        fn marginals_stay_spd(seed in 0u64..1_000_000, d in 1usize..6, eps in prop_oneof![Just(0.0), 0.01f64..2.0]) {
            let mut rng = rng::stream(seed, "grid");
            let a = random_component(&mut rng, d);
            let b = random_component(&mut rng, d);
            let br = GaussianBridge::new(&a, &b, &BridgeConfig { epsilon: eps }).unwrap();
            for i in 0..=100 {
                let m = br.marginal(i as f64 / 100.0).unwrap();
                prop_assert!(check_spd(&m.covariance).is_ok());
            }
        }
    }
}
