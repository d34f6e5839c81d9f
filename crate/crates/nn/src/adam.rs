use crate::conv::ConvParams;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments mirror the parameter list of one
/// network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    pub first: Vec<ConvParams>,
    pub second: Vec<ConvParams>,
}

impl Adam {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a ConvParams>) -> Self {
        let first: Vec<ConvParams> = params.into_iter().map(ConvParams::zeros_like).collect();
        Self {
            config,
            steps: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step(&mut self, params: Vec<&mut ConvParams>, grads: &[ConvParams]) {
        assert_eq!(params.len(), grads.len(), "gradient list length");
        assert_eq!(params.len(), self.first.len(), "moment list length");
        self.steps += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let groups = [
                (&mut p.weight, &g.weight, &mut m.weight, &mut v.weight),
                (&mut p.bias, &g.bias, &mut m.bias, &mut v.bias),
            ];
            for (pv, gv, mv, vv) in groups {
                for (((pi, gi), mi), vi) in
                    pv.iter_mut().zip(gv).zip(mv.iter_mut()).zip(vv.iter_mut())
                {
                    *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *pi -= learning_rate * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}
