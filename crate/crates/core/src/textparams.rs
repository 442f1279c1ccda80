//! Learnable text-input parameters for the four tuning methods.
//!
//! | method      | encoder input for class `i` | learnable          |
//! |-------------|-----------------------------|--------------------|
//! | name tuning | `[q, n_i + ε_i]`            | `ε_1..ε_N`         |
//! | coop        | `[c, n_i]`                  | `c`                |
//! | coop-csc    | `[c_i, n_i]`                | `c_1..c_N`         |
//! | cona        | `[c, n_i + ε_i]`            | `c`, `ε_1..ε_N`    |
//!
//! Contexts start from `N(0, 0.02²)`, offsets start at exactly zero, and only
//! offsets are penalized.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::classify::PromptSpec;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tokens::{ClassEntry, ClassSet, TokenSequence};

pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    NameTuning,
    Coop,
    CoopCsc,
    Cona,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NameTuning, Method::Coop, Method::CoopCsc, Method::Cona];

    pub fn code(self) -> u8 {
        match self {
            Method::NameTuning => 0,
            Method::Coop => 1,
            Method::CoopCsc => 2,
            Method::Cona => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown method code {code}")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NameTuning => "name-tuning",
            Method::Coop => "coop",
            Method::CoopCsc => "coop-csc",
            Method::Cona => "cona",
        }
    }

    pub fn has_offsets(self) -> bool {
        matches!(self, Method::NameTuning | Method::Cona)
    }

    pub fn has_shared_context(self) -> bool {
        matches!(self, Method::Coop | Method::Cona)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "name-tuning" => Ok(Method::NameTuning),
            "coop" => Ok(Method::Coop),
            "coop-csc" => Ok(Method::CoopCsc),
            "cona" => Ok(Method::Cona),
            other => Err(Error::config(format!("unknown tuning method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextParameterSet {
    method: Method,
    l_context: usize,
    shared_context: Option<Array2<f64>>,
    class_contexts: Option<Vec<Array2<f64>>>,
    offsets: Option<Vec<Array2<f64>>>,
    fixed_prompt: Option<PromptSpec>,
    /// Random-name ablation: replaces every class's name tokens.
    name_overrides: Option<Vec<TokenSequence>>,
    num_classes: usize,
}

fn normal_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        rng.normal(0.0, CONTEXT_INIT_STD) as f32 as f64
    })
}

/// Fresh parameters for `method`.
///
/// `prompt` is required for name tuning and ignored otherwise. With
/// `ablation_random_names`, each class's name tokens are replaced by
/// `N(0, 0.02²)` draws of the same shape.
pub fn init_parameters(
    method: Method,
    classes: &ClassSet,
    l_context: usize,
    prompt: Option<&PromptSpec>,
    rng: &SeededRng,
    ablation_random_names: bool,
) -> Result<TextParameterSet> {
    if classes.is_empty() {
        return Err(Error::config("cannot initialize parameters for zero classes"));
    }
    let d = classes.entries()[0].name_tokens.d_token();
    if matches!(method, Method::Coop | Method::CoopCsc) && l_context == 0 {
        return Err(Error::config(format!("{method} needs a context length >= 1")));
    }
    let mut ctx_rng = rng.fork("context-init");
    let l_context = if method == Method::NameTuning { 0 } else { l_context };
    let shared_context = method
        .has_shared_context()
        .then(|| normal_matrix(&mut ctx_rng, l_context, d));
    let class_contexts = (method == Method::CoopCsc).then(|| {
        classes
            .iter()
            .map(|_| normal_matrix(&mut ctx_rng, l_context, d))
            .collect()
    });
    let offsets = method.has_offsets().then(|| {
        classes
            .iter()
            .map(|c| Array2::zeros(c.name_tokens.shape()))
            .collect()
    });
    let fixed_prompt = match method {
        Method::NameTuning => Some(
            prompt
                .ok_or_else(|| Error::config("name tuning needs a fixed prompt"))?
                .clone(),
        ),
        _ => None,
    };
    let name_overrides = ablation_random_names.then(|| {
        let mut name_rng = rng.fork("random-names");
        classes
            .iter()
            .map(|c| {
                let (l, d) = c.name_tokens.shape();
                TokenSequence::from_rows(normal_matrix(&mut name_rng, l, d))
            })
            .collect()
    });
    Ok(TextParameterSet {
        method,
        l_context,
        shared_context,
        class_contexts,
        offsets,
        fixed_prompt,
        name_overrides,
        num_classes: classes.len(),
    })
}

impl TextParameterSet {
    /// Rebuilds a parameter set from its learnable tensors in
    /// [`learnable`](Self::learnable) order.
    pub fn from_tensors(
        method: Method,
        num_classes: usize,
        tensors: Vec<Array2<f64>>,
        fixed_prompt: Option<PromptSpec>,
        name_overrides: Option<Vec<TokenSequence>>,
    ) -> Result<Self> {
        let expected = expected_tensor_count(method, num_classes);
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "{method} with {num_classes} classes needs {expected} tensors, got {}",
                tensors.len()
            )));
        }
        if method == Method::NameTuning && fixed_prompt.is_none() {
            return Err(Error::config("name tuning needs a fixed prompt"));
        }
        if let Some(names) = &name_overrides {
            if names.len() != num_classes {
                return Err(Error::Format("one name override per class required".into()));
            }
        }
        let mut rest = tensors.into_iter();
        let shared_context = method.has_shared_context().then(|| rest.next().unwrap());
        let class_contexts =
            (method == Method::CoopCsc).then(|| rest.by_ref().take(num_classes).collect::<Vec<_>>());
        let offsets = method
            .has_offsets()
            .then(|| rest.by_ref().take(num_classes).collect::<Vec<_>>());
        let l_context = shared_context
            .as_ref()
            .map(|c| c.nrows())
            .or_else(|| class_contexts.as_ref().map(|cs| cs[0].nrows()))
            .unwrap_or(0);
        if let Some(cs) = &class_contexts {
            if cs.iter().any(|c| c.nrows() != l_context) {
                return Err(Error::Format("class contexts differ in length".into()));
            }
        }
        Ok(Self {
            method,
            l_context,
            shared_context,
            class_contexts,
            offsets,
            fixed_prompt: if method == Method::NameTuning { fixed_prompt } else { None },
            name_overrides,
            num_classes,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn l_context(&self) -> usize {
        self.l_context
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shared_context(&self) -> Option<&Array2<f64>> {
        self.shared_context.as_ref()
    }

    pub fn class_contexts(&self) -> Option<&[Array2<f64>]> {
        self.class_contexts.as_deref()
    }

    pub fn offsets(&self) -> Option<&[Array2<f64>]> {
        self.offsets.as_deref()
    }

    pub fn fixed_prompt(&self) -> Option<&PromptSpec> {
        self.fixed_prompt.as_ref()
    }

    pub fn name_overrides(&self) -> Option<&[TokenSequence]> {
        self.name_overrides.as_deref()
    }

    /// True for the random-name ablation, which trains without the penalty.
    pub fn random_names(&self) -> bool {
        self.name_overrides.is_some()
    }

    /// Learnable tensors: shared context, then class contexts, then offsets.
    pub fn learnable(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::new();
        out.extend(self.shared_context.iter());
        out.extend(self.class_contexts.iter().flatten());
        out.extend(self.offsets.iter().flatten());
        out
    }

    pub fn learnable_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        out.extend(self.shared_context.iter_mut());
        out.extend(self.class_contexts.iter_mut().flatten());
        out.extend(self.offsets.iter_mut().flatten());
        out
    }

    /// Index of class `i`'s offset within [`learnable`](Self::learnable).
    pub(crate) fn offset_slot(&self, class: usize) -> Option<usize> {
        self.offsets.as_ref()?;
        let before = usize::from(self.shared_context.is_some())
            + self.class_contexts.as_ref().map_or(0, Vec::len);
        Some(before + class)
    }

    /// Index of the context tensor feeding class `i`.
    pub(crate) fn context_slot(&self, class: usize) -> Option<usize> {
        if self.shared_context.is_some() {
            Some(0)
        } else if self.class_contexts.is_some() {
            Some(class)
        } else {
            None
        }
    }

    pub fn num_learnable_values(&self) -> usize {
        self.learnable().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.learnable().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_learnable_values() {
            return Err(Error::dim(format!(
                "expected {} values, got {}",
                self.num_learnable_values(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for t in self.learnable_mut() {
            for v in t.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
        Ok(())
    }

    /// Name tokens the method sees for `class`: the override in the
    /// random-name ablation, the class name otherwise.
    pub fn effective_name<'a>(&'a self, class: &'a ClassEntry) -> &'a TokenSequence {
        match &self.name_overrides {
            Some(names) => &names[class.class_id],
            None => &class.name_tokens,
        }
    }

    /// The encoder input for one class.
    pub fn assemble(&self, class: &ClassEntry) -> Result<TokenSequence> {
        let i = class.class_id;
        if i >= self.num_classes {
            return Err(Error::config(format!(
                "class {i} is outside the parameter set's {} classes",
                self.num_classes
            )));
        }
        let name = self.effective_name(class);
        let name = match &self.offsets {
            Some(offsets) => name.add_offset(&offsets[i])?,
            None => name.clone(),
        };
        let prefix = match self.method {
            Method::NameTuning => self
                .fixed_prompt
                .as_ref()
                .expect("name tuning always carries a prompt")
                .prefix()
                .clone(),
            Method::Coop | Method::Cona => {
                TokenSequence::from_rows(self.shared_context.clone().expect("context present"))
            }
            Method::CoopCsc => TokenSequence::from_rows(
                self.class_contexts.as_ref().expect("contexts present")[i].clone(),
            ),
        };
        prefix.concat(&name)
    }

    /// Length of the assembled prefix (prompt or context).
    pub fn prefix_len(&self) -> usize {
        match self.method {
            Method::NameTuning => self.fixed_prompt.as_ref().map_or(0, |p| p.prefix().len()),
            _ => self.l_context,
        }
    }
}

fn expected_tensor_count(method: Method, n: usize) -> usize {
    match method {
        Method::NameTuning => n,
        Method::Coop => 1,
        Method::CoopCsc => n,
        Method::Cona => 1 + n,
    }
}

/// `½ Σ_i ‖ε_i‖²` over offsets only; contexts never contribute.
pub fn parameter_l2(params: &TextParameterSet) -> f64 {
    params.offsets().map_or(0.0, |offsets| {
        0.5 * offsets
            .iter()
            .map(|e| e.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
    })
}
