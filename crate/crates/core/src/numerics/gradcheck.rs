use super::{Graph, Mode, NumericsError, ParamId, ParamSet, Tensor, Var};

/// Finite-difference step used by default.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which gradient differences are compared absolutely
/// rather than relatively.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error, as (parameter name or "input", flat index).
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// `|a - b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Default)]
struct Tracker {
    max_rel: f64,
    max_abs: f64,
    worst: Option<(String, usize)>,
    checked: usize,
}

impl Tracker {
    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        self.max_abs = self.max_abs.max((analytic - numeric).abs());
        if rel > self.max_rel || self.worst.is_none() {
            self.max_rel = self.max_rel.max(rel);
            self.worst = Some((name.to_string(), index));
        }
        self.checked += 1;
    }

    fn finish(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            worst: self.worst,
            checked: self.checked,
            tol,
            passed: self.max_rel < tol,
        }
    }
}

fn scalar(g: &Graph<'_>, v: Var) -> Result<f64, NumericsError> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(NumericsError::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.item())
}

/// Checks the gradient of a scalar function of one tensor at `point`.
///
/// The function is evaluated in eval mode so dropout cannot perturb it.
pub fn grad_check<F, E>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'static>, Var) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let mut graph = Graph::new(Mode::Eval);
    let x = graph.leaf(point.clone(), true);
    let y = f(&mut graph, x)?;
    scalar(&graph, y)?;
    graph.backward(y)?;
    let analytic = graph.grad(x).expect("leaf gradient");

    let eval = |p: Tensor| -> Result<f64, E> {
        let mut g = Graph::new(Mode::Eval);
        let x = g.leaf(p, false);
        let y = f(&mut g, x)?;
        Ok(scalar(&g, y)?)
    };

    let mut tracker = Tracker::default();
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += DEFAULT_STEP;
        let mut minus = point.clone();
        minus.data_mut()[i] -= DEFAULT_STEP;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * DEFAULT_STEP);
        tracker.record("input", i, analytic.data()[i], numeric);
    }
    Ok(tracker.finish(tol))
}

/// Checks the gradient of a scalar function of a parameter set with respect
/// to every entry of every parameter selected by `select`.
pub fn grad_check_params<F, S, E>(params: &ParamSet, f: F, select: S, tol: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<'_>) -> Result<Var, E>,
    S: Fn(ParamId, &str) -> bool,
    E: From<NumericsError>,
{
    let analytic = {
        let mut graph = Graph::with_params(params, Mode::Eval);
        let y = f(&mut graph)?;
        scalar(&graph, y)?;
        graph.backward(y)?;
        graph.param_grads()
    };

    let eval = |p: &ParamSet| -> Result<f64, E> {
        let mut g = Graph::with_params(p, Mode::Eval);
        let y = f(&mut g)?;
        Ok(scalar(&g, y)?)
    };

    let mut work = params.clone();
    let mut tracker = Tracker::default();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let name = params.name(id).to_string();
        if !select(id, &name) {
            continue;
        }
        for i in 0..params.get(id).numel() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + DEFAULT_STEP;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - DEFAULT_STEP;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * DEFAULT_STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[i]);
            tracker.record(&name, i, a, numeric);
        }
    }
    Ok(tracker.finish(tol))
}
