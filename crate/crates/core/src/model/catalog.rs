use super::{ChainSpec, DiffusionDescriptor, ModelDescriptor, Modulation, Term};
use crate::error::{Error, Result};

const NAMES: [&str; 4] = ["brownian", "kolmogorov", "chain3", "nonlinear-kolmogorov"];

/// Names accepted by [`model_by_name`].
pub fn catalog_names() -> &'static [&'static str] {
    &NAMES
}

fn unit_diffusion() -> DiffusionDescriptor {
    DiffusionDescriptor {
        base: vec![vec![1.0]],
        modulation: None,
    }
}

fn descriptor(name: &str) -> Option<ModelDescriptor> {
    let (n, drift, lipschitz, margin) = match name {
        "brownian" => (1, vec![vec![vec![]]], 0.0, 0.0),
        "kolmogorov" => (2, vec![vec![vec![]], vec![vec![Term::coord(1.0, 1, 1)]]], 1.0, 1.0),
        "chain3" => (
            3,
            vec![
                vec![vec![]],
                vec![vec![Term::coord(1.0, 1, 1)]],
                vec![vec![Term::coord(1.0, 2, 1)]],
            ],
            1.0,
            1.0,
        ),
        "nonlinear-kolmogorov" => (
            2,
            vec![
                vec![vec![]],
                vec![vec![Term::coord(1.0, 1, 1), Term::sin(0.25, 1, 1, 1.0)]],
            ],
            1.25,
            0.75,
        ),
        _ => return None,
    };
    Some(ModelDescriptor {
        name: Some(name.to_string()),
        n,
        d: 1,
        drift,
        diffusion: unit_diffusion(),
        lipschitz: Some(lipschitz),
        holder: Some(1.0),
        ellipticity: Some(1.0),
        nondegeneracy_margin: Some(margin),
    })
}

/// Catalog model by name.
pub fn model_by_name(name: &str) -> Result<ChainSpec> {
    match descriptor(name) {
        Some(desc) => ChainSpec::from_descriptor(&desc),
        None => Err(Error::Config(format!(
            "unknown model {name:?}; available models: {}",
            NAMES.join(", ")
        ))),
    }
}

/// The nonlinear Kolmogorov model with diffusion `1 + eps·sin(x₁)` and frozen coefficient 1.
pub fn nonlinear_kolmogorov_modulated(eps: f64) -> Result<ChainSpec> {
    let mut desc = descriptor("nonlinear-kolmogorov").unwrap();
    desc.name = Some(format!("nonlinear-kolmogorov-eps{eps}"));
    desc.diffusion.modulation = Some(Modulation {
        amplitude: eps,
        freq: 1.0,
        phase: 0.0,
        component: 1,
    });
    desc.ellipticity = Some((1.0 + eps.abs()).max(1.0 / (1.0 - eps.abs())));
    ChainSpec::from_descriptor(&desc)
}

/// Descriptor of a catalog model, e.g. to serialize it into a config file.
pub fn catalog_descriptor(name: &str) -> Option<ModelDescriptor> {
    descriptor(name)
}
