//! Explicit embedded Runge–Kutta solvers with adaptive step control.
//!
//! Dormand–Prince 5(4), Bogacki–Shampine 3(2) and the Dormand–Prince 8(5,3)
//! pair share one stepping engine driven by a tableau. Every solve counts
//! right-hand-side evaluations.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Rk45,
    Rk23,
    Dop853,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Rk45 => "RK45",
            Method::Rk23 => "RK23",
            Method::Dop853 => "DOP853",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RK45" => Ok(Method::Rk45),
            "RK23" => Ok(Method::Rk23),
            "DOP853" => Ok(Method::Dop853),
            _ => Err(Error::InvalidArgument(format!("unknown solver method {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    /// Attempted steps (accepted plus rejected) before giving up.
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk45,
            rtol: 1e-3,
            atol: 1e-3,
            max_steps: 20_000,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, tol: f64) -> Self {
        Self {
            method,
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rtol", self.rtol), ("atol", self.atol)] {
            if !(1e-8..=1e-1).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [1e-8, 1e-1]")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Work done by one solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OdeStats {
    /// Right-hand-side evaluations.
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
}

struct Tableau {
    c: Vec<f64>,
    /// Row `i` holds the coefficients of stage `i` on stages `0..i`.
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    /// Error weights; index `stages` refers to `f(t + h, y_new)`.
    e: Vec<f64>,
    /// Secondary lower-order estimate blended in as in DOP853.
    e_low: Option<Vec<f64>>,
    /// Exponent denominator for the step-size update.
    err_order: f64,
    beta: f64,
    fac_min: f64,
    fac_max: f64,
}

impl Tableau {
    fn stages(&self) -> usize {
        self.b.len()
    }

    fn uses_new_point(&self) -> bool {
        self.e.len() > self.stages()
    }
}

fn dormand_prince() -> Tableau {
    Tableau {
        c: vec![0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0],
        a: vec![
            vec![],
            vec![1.0 / 5.0],
            vec![3.0 / 40.0, 9.0 / 40.0],
            vec![44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
            vec![19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
            vec![9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
        ],
        b: vec![35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        e: vec![
            -71.0 / 57600.0,
            0.0,
            71.0 / 16695.0,
            -71.0 / 1920.0,
            17253.0 / 339200.0,
            -22.0 / 525.0,
            1.0 / 40.0,
        ],
        e_low: None,
        err_order: 5.0,
        beta: 0.04,
        fac_min: 0.2,
        fac_max: 10.0,
    }
}

fn bogacki_shampine() -> Tableau {
    Tableau {
        c: vec![0.0, 1.0 / 2.0, 3.0 / 4.0],
        a: vec![vec![], vec![1.0 / 2.0], vec![0.0, 3.0 / 4.0]],
        b: vec![2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0],
        e: vec![5.0 / 72.0, -1.0 / 12.0, -1.0 / 9.0, 1.0 / 8.0],
        e_low: None,
        err_order: 3.0,
        beta: 0.04,
        fac_min: 0.2,
        fac_max: 10.0,
    }
}

fn dop853() -> Tableau {
    let z = 0.0;
    let a = vec![
        vec![],
        vec![A21],
        vec![A31, A32],
        vec![A41, z, A43],
        vec![A51, z, A53, A54],
        vec![A61, z, z, A64, A65],
        vec![A71, z, z, A74, A75, A76],
        vec![A81, z, z, A84, A85, A86, A87],
        vec![A91, z, z, A94, A95, A96, A97, A98],
        vec![A101, z, z, A104, A105, A106, A107, A108, A109],
        vec![A111, z, z, A114, A115, A116, A117, A118, A119, A1110],
        vec![A121, z, z, A124, A125, A126, A127, A128, A129, A1210, A1211],
    ];
    let b = vec![B1, z, z, z, z, B6, B7, B8, B9, B10, B11, B12];
    let e = vec![ER1, z, z, z, z, ER6, ER7, ER8, ER9, ER10, ER11, ER12];
    // b minus the third-order weights
    let mut e_low = b.clone();
    e_low[0] -= BHH1;
    e_low[8] -= BHH2;
    e_low[11] -= BHH3;
    Tableau {
        c: vec![0.0, C2, C3, C4, C5, C6, C7, C8, C9, C10, C11, 1.0],
        a,
        b,
        e,
        e_low: Some(e_low),
        err_order: 8.0,
        beta: 0.0,
        fac_min: 0.333,
        fac_max: 6.0,
    }
}

// DOP853 coefficients
#[allow(clippy::excessive_precision)]
mod dop853_coefficients {
    pub(super) const A21: f64 = 5.26001519587677318785587544488E-2;
    pub(super) const A31: f64 = 1.97250569845378994544595329183E-2;
    pub(super) const A32: f64 = 5.91751709536136983633785987549E-2;
    pub(super) const A41: f64 = 2.95875854768068491816892993775E-2;
    pub(super) const A43: f64 = 8.87627564304205475450678981324E-2;
    pub(super) const A51: f64 = 2.41365134159266685502369798665E-1;
    pub(super) const A53: f64 = -8.84549479328286085344864962717E-1;
    pub(super) const A54: f64 = 9.24834003261792003115737966543E-1;
    pub(super) const A61: f64 = 3.7037037037037037037037037037E-2;
    pub(super) const A64: f64 = 1.70828608729473871279604482173E-1;
    pub(super) const A65: f64 = 1.25467687566822425016691814123E-1;
    pub(super) const A71: f64 = 3.7109375E-2;
    pub(super) const A74: f64 = 1.70252211019544039314978060272E-1;
    pub(super) const A75: f64 = 6.02165389804559606850219397283E-2;
    pub(super) const A76: f64 = -1.7578125E-2;
    pub(super) const A81: f64 = 3.70920001185047927108779319836E-2;
    pub(super) const A84: f64 = 1.70383925712239993810214054705E-1;
    pub(super) const A85: f64 = 1.07262030446373284651809199168E-1;
    pub(super) const A86: f64 = -1.53194377486244017527936158236E-2;
    pub(super) const A87: f64 = 8.27378916381402288758473766002E-3;
    pub(super) const A91: f64 = 6.24110958716075717114429577812E-1;
    pub(super) const A94: f64 = -3.36089262944694129406857109825E0;
    pub(super) const A95: f64 = -8.68219346841726006818189891453E-1;
    pub(super) const A96: f64 = 2.75920996994467083049415600797E1;
    pub(super) const A97: f64 = 2.01540675504778934086186788979E1;
    pub(super) const A98: f64 = -4.34898841810699588477366255144E1;
    pub(super) const A101: f64 = 4.77662536438264365890433908527E-1;
    pub(super) const A104: f64 = -2.48811461997166764192642586468E0;
    pub(super) const A105: f64 = -5.90290826836842996371446475743E-1;
    pub(super) const A106: f64 = 2.12300514481811942347288949897E1;
    pub(super) const A107: f64 = 1.52792336328824235832596922938E1;
    pub(super) const A108: f64 = -3.32882109689848629194453265587E1;
    pub(super) const A109: f64 = -2.03312017085086261358222928593E-2;
    pub(super) const A111: f64 = -9.3714243008598732571704021658E-1;
    pub(super) const A114: f64 = 5.18637242884406370830023853209E0;
    pub(super) const A115: f64 = 1.09143734899672957818500254654E0;
    pub(super) const A116: f64 = -8.14978701074692612513997267357E0;
    pub(super) const A117: f64 = -1.85200656599969598641566180701E1;
    pub(super) const A118: f64 = 2.27394870993505042818970056734E1;
    pub(super) const A119: f64 = 2.49360555267965238987089396762E0;
    pub(super) const A1110: f64 = -3.0467644718982195003823669022E0;
    pub(super) const A121: f64 = 2.27331014751653820792359768449E0;
    pub(super) const A124: f64 = -1.05344954667372501984066689879E1;
    pub(super) const A125: f64 = -2.00087205822486249909675718444E0;
    pub(super) const A126: f64 = -1.79589318631187989172765950534E1;
    pub(super) const A127: f64 = 2.79488845294199600508499808837E1;
    pub(super) const A128: f64 = -2.85899827713502369474065508674E0;
    pub(super) const A129: f64 = -8.87285693353062954433549289258E0;
    pub(super) const A1210: f64 = 1.23605671757943030647266201528E1;
    pub(super) const A1211: f64 = 6.43392746015763530355970484046E-1;
    pub(super) const B1: f64 = 5.42937341165687622380535766363E-2;
    pub(super) const B6: f64 = 4.45031289275240888144113950566E0;
    pub(super) const B7: f64 = 1.89151789931450038304281599044E0;
    pub(super) const B8: f64 = -5.8012039600105847814672114227E0;
    pub(super) const B9: f64 = 3.1116436695781989440891606237E-1;
    pub(super) const B10: f64 = -1.52160949662516078556178806805E-1;
    pub(super) const B11: f64 = 2.01365400804030348374776537501E-1;
    pub(super) const B12: f64 = 4.47106157277725905176885569043E-2;
    pub(super) const BHH1: f64 = 0.244094488188976377952755905512;
    pub(super) const BHH2: f64 = 0.733846688281611857341361741547;
    pub(super) const BHH3: f64 = 0.220588235294117647058823529412E-01;
    pub(super) const C2: f64 = 0.526001519587677318785587544488E-01;
    pub(super) const C3: f64 = 0.789002279381515978178381316732E-01;
    pub(super) const C4: f64 = 0.118350341907227396726757197510;
    pub(super) const C5: f64 = 0.281649658092772603273242802490;
    pub(super) const C6: f64 = 0.333333333333333333333333333333;
    pub(super) const C7: f64 = 0.25;
    pub(super) const C8: f64 = 0.307692307692307692307692307692;
    pub(super) const C9: f64 = 0.651282051282051282051282051282;
    pub(super) const C10: f64 = 0.6;
    pub(super) const C11: f64 = 0.857142857142857142857142857142;
    pub(super) const ER1: f64 = 0.1312004499419488073250102996E-01;
    pub(super) const ER6: f64 = -0.1225156446376204440720569753E+01;
    pub(super) const ER7: f64 = -0.4957589496572501915214079952;
    pub(super) const ER8: f64 = 0.1664377182454986536961530415E+01;
    pub(super) const ER9: f64 = -0.3503288487499736816886487290;
    pub(super) const ER10: f64 = 0.3341791187130174790297318841;
    pub(super) const ER11: f64 = 0.8192320648511571246570742613E-01;
    pub(super) const ER12: f64 = -0.2235530786388629525884427845E-01;
}
use dop853_coefficients::*;

fn tableau(method: Method) -> Tableau {
    match method {
        Method::Rk45 => dormand_prince(),
        Method::Rk23 => bogacki_shampine(),
        Method::Dop853 => dop853(),
    }
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|x| x * x).sum::<f64>() / n as f64).sqrt()
}

/// Integrates `dy/dt = f(t, y)` from `t0` to `t1` (either direction).
/// `f` writes the derivative into its output slice.
pub fn solve<F>(mut f: F, t0: f64, t1: f64, y0: &[f64], config: &SolverConfig) -> Result<(Vec<f64>, OdeStats)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    config.validate()?;
    let tab = tableau(config.method);
    let n = y0.len();
    let s = tab.stages();
    let mut stats = OdeStats::default();
    let mut y = y0.to_vec();
    if t0 == t1 || n == 0 {
        return Ok((y, stats));
    }
    let dir = (t1 - t0).signum();
    let mut eval = |t: f64, y: &[f64], out: &mut [f64], stats: &mut OdeStats| -> Result<()> {
        stats.nfe += 1;
        f(t, y, out)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ode right-hand side at t = {t}")));
        }
        Ok(())
    };

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; s + 1];
    eval(t0, &y, &mut k[0], &mut stats)?;

    // initial step (Hairer, Nørsett & Wanner II.4)
    let scale: Vec<f64> = y.iter().map(|v| config.atol + config.rtol * v.abs()).collect();
    let d0 = rms(y.iter().zip(&scale).map(|(a, s)| a / s), n);
    let d1 = rms(k[0].iter().zip(&scale).map(|(a, s)| a / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min((t1 - t0).abs());
    let y1: Vec<f64> = y.iter().zip(&k[0]).map(|(a, d)| a + dir * h0 * d).collect();
    let mut f1 = vec![0.0; n];
    eval(t0 + dir * h0, &y1, &mut f1, &mut stats)?;
    let d2 = rms(f1.iter().zip(&k[0]).zip(&scale).map(|((a, b), s)| (a - b) / s), n) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / tab.err_order)
    };
    let mut h = (100.0 * h0).min(h1).min((t1 - t0).abs());

    let expo = 1.0 / tab.err_order - 0.75 * tab.beta;
    let safety = 0.9;
    let mut fac_old: f64 = 1e-4;
    let mut t = t0;
    let mut y_stage = vec![0.0; n];
    let mut y_new = vec![0.0; n];
    let mut last_rejected = false;
    let mut attempts = 0usize;
    loop {
        let remaining = (t1 - t).abs();
        if remaining <= 1e-14 * t1.abs().max(1.0) {
            break;
        }
        if attempts >= config.max_steps {
            return Err(Error::SolverDiverged {
                max_steps: config.max_steps,
                at: t,
            });
        }
        attempts += 1;
        let last = h >= remaining;
        if last {
            h = remaining;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::SolverDiverged {
                max_steps: config.max_steps,
                at: t,
            });
        }
        let hs = dir * h;
        for i in 1..s {
            y_stage.copy_from_slice(&y);
            for (j, &aij) in tab.a[i].iter().enumerate() {
                if aij != 0.0 {
                    let w = hs * aij;
                    for (ys, kj) in y_stage.iter_mut().zip(&k[j]) {
                        *ys += w * kj;
                    }
                }
            }
            eval(t + tab.c[i] * hs, &y_stage, &mut k[i], &mut stats)?;
        }
        y_new.copy_from_slice(&y);
        for (j, &bj) in tab.b.iter().enumerate() {
            if bj != 0.0 {
                let w = hs * bj;
                for (yn, kj) in y_new.iter_mut().zip(&k[j]) {
                    *yn += w * kj;
                }
            }
        }
        let t_new = if last { t1 } else { t + hs };
        if tab.uses_new_point() {
            eval(t_new, &y_new, &mut k[s], &mut stats)?;
        }

        let sk: Vec<f64> = y
            .iter()
            .zip(&y_new)
            .map(|(a, b)| config.atol + config.rtol * a.abs().max(b.abs()))
            .collect();
        let weighted = |w: &[f64]| -> f64 {
            (0..n)
                .map(|i| {
                    let e: f64 = w.iter().zip(&k).map(|(wj, kj)| wj * kj[i]).sum();
                    (e / sk[i]).powi(2)
                })
                .sum::<f64>()
        };
        let err = match &tab.e_low {
            None => h * (weighted(&tab.e) / n as f64).sqrt(),
            Some(e_low) => {
                let e5 = weighted(&tab.e);
                let e3 = weighted(e_low);
                let mut deno = e5 + 0.01 * e3;
                if deno <= 0.0 {
                    deno = 1.0;
                }
                h * e5 * (1.0 / (deno * n as f64)).sqrt()
            }
        };
        let err = if err.is_finite() { err } else { f64::MAX };

        let fac11 = err.powf(expo);
        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(tab.beta) / safety).clamp(1.0 / tab.fac_max, 1.0 / tab.fac_min);
            let mut h_new = h / fac;
            fac_old = err.max(1e-4);
            stats.accepted += 1;
            if !tab.uses_new_point() {
                eval(t_new, &y_new, &mut k[s], &mut stats)?;
            }
            k.swap(0, s);
            std::mem::swap(&mut y, &mut y_new);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("ode state at t = {t_new}")));
            }
            t = t_new;
            if last {
                break;
            }
            if last_rejected {
                h_new = h_new.min(h);
            }
            last_rejected = false;
            h = h_new;
        } else {
            stats.rejected += 1;
            last_rejected = true;
            h /= (fac11 / safety).min(1.0 / tab.fac_min);
        }
    }
    Ok((y, stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    const METHODS: [Method; 3] = [Method::Rk45, Method::Rk23, Method::Dop853];

    fn decay(_t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = -y[0];
        Ok(())
    }

    #[test]
    fn exponential_decay_within_tolerance() {
        for m in METHODS {
            for tol in [1e-3, 1e-6] {
                let cfg = SolverConfig::new(m, tol);
                let (y, st) = solve(decay, 0.0, 2.0, &[1.0], &cfg).unwrap();
                let exact = (-2.0f64).exp();
                assert!((y[0] - exact).abs() < 10.0 * tol, "{m:?} {tol}: {} vs {exact}", y[0]);
                assert!(st.nfe >= 2 && st.accepted >= 1);
            }
        }
    }

    #[test]
    fn harmonic_oscillator_backward() {
        let f = |_t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
            out[0] = y[1];
            out[1] = -y[0];
            Ok(())
        };
        for m in METHODS {
            let cfg = SolverConfig::new(m, 1e-7);
            let (y, _) = solve(f, 3.0, 0.0, &[3f64.cos(), -3f64.sin()], &cfg).unwrap();
            assert!((y[0] - 1.0).abs() < 1e-5 && y[1].abs() < 1e-5, "{m:?} {y:?}");
        }
    }

    #[test]
    fn higher_order_takes_fewer_steps_at_tight_tolerance() {
        let f = |t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
            out[0] = (3.0 * t).cos() * y[0];
            Ok(())
        };
        let steps = |m| solve(f, 0.0, 5.0, &[1.0], &SolverConfig::new(m, 1e-8)).unwrap().1.accepted;
        assert!(steps(Method::Dop853) < steps(Method::Rk45));
        assert!(steps(Method::Rk45) < steps(Method::Rk23));
        let (y, _) = solve(f, 0.0, 5.0, &[1.0], &SolverConfig::new(Method::Dop853, 1e-8)).unwrap();
        assert!((y[0] - ((15f64).sin() / 3.0).exp()).abs() < 1e-6);
    }

    #[test]
    fn step_budget_and_non_finite() {
        let cfg = SolverConfig {
            max_steps: 3,
            ..SolverConfig::new(Method::Rk45, 1e-8)
        };
        let stiff = |_t: f64, y: &[f64], out: &mut [f64]| -> Result<()> {
            out[0] = -1e4 * (y[0] - 1.0);
            Ok(())
        };
        assert!(matches!(solve(stiff, 0.0, 10.0, &[0.0], &cfg), Err(Error::SolverDiverged { .. })));
        let bad = |_t: f64, _y: &[f64], out: &mut [f64]| -> Result<()> {
            out[0] = f64::NAN;
            Ok(())
        };
        assert!(matches!(solve(bad, 0.0, 1.0, &[0.0], &SolverConfig::default()), Err(Error::NonFinite(_))));
        assert!(SolverConfig::new(Method::Rk45, 0.5).validate().is_err());
    }

    #[test]
    fn zero_span_is_free() {
        let (y, st) = solve(decay, 1.0, 1.0, &[2.0], &SolverConfig::default()).unwrap();
        assert_eq!((y, st.nfe), (vec![2.0], 0));
    }
}
