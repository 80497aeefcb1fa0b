use serde::{Deserialize, Serialize};

use super::layers::LayerDesc;
use super::sequential::{ParamStore, Sequential};
use crate::error::{Error, Result};
use crate::util::sha256_hex;

/// A named representation level bound to a layer boundary
/// (boundary `k` = activation entering layer `k`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tap {
    pub id: String,
    pub boundary: usize,
}

impl Tap {
    pub fn new(id: impl Into<String>, boundary: usize) -> Self {
        Tap { id: id.into(), boundary }
    }
}

/// Levels ordered from the input side toward the head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TapSet(Vec<Tap>);

impl TapSet {
    pub fn new(taps: Vec<Tap>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Spec("a tap set needs at least one level".into()));
        }
        for w in taps.windows(2) {
            if w[1].boundary <= w[0].boundary {
                return Err(Error::Spec(format!(
                    "tap '{}' (boundary {}) must lie strictly deeper than '{}' (boundary {})",
                    w[1].id, w[1].boundary, w[0].id, w[0].boundary
                )));
            }
        }
        for (i, t) in taps.iter().enumerate() {
            if taps[..i].iter().any(|u| u.id == t.id) {
                return Err(Error::Spec(format!("duplicate tap id '{}'", t.id)));
            }
        }
        Ok(TapSet(taps))
    }

    pub fn taps(&self) -> &[Tap] {
        &self.0
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|t| t.id.as_str())
    }

    pub fn get(&self, id: &str) -> Result<&Tap> {
        self.0.iter().find(|t| t.id == id).ok_or_else(|| Error::UnknownLevel(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.0.iter().any(|t| t.id == id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sorts level ids into depth order, rejecting unknown ones.
    pub fn order<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Vec<String>> {
        let mut picked: Vec<&Tap> = ids.into_iter().map(|id| self.get(id)).collect::<Result<_>>()?;
        picked.sort_by_key(|t| t.boundary);
        picked.dedup_by_key(|t| t.boundary);
        Ok(picked.into_iter().map(|t| t.id.clone()).collect())
    }
}

/// Layer graph of one classifier: `layers`, then a dense head of `head` classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    /// Per-sample input shape.
    pub input: Vec<usize>,
    pub layers: Vec<LayerDesc>,
    pub head: usize,
    pub taps: TapSet,
}

impl ModelSpec {
    /// Layer descriptors including the head.
    pub fn full_layers(&self) -> Vec<LayerDesc> {
        let mut all = self.layers.clone();
        all.push(LayerDesc::dense(self.head));
        all
    }

    /// Checks shape chaining, the head and tap bindings.
    pub fn validate(&self) -> Result<()> {
        if self.head == 0 {
            return Err(Error::Spec(format!("{}: head needs at least one class", self.name)));
        }
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(Error::Spec(format!("{}: invalid input shape {:?}", self.name, self.input)));
        }
        TapSet::new(self.taps.taps().to_vec())?;
        if let Some(t) = self.taps.taps().iter().find(|t| t.boundary > self.layers.len()) {
            return Err(Error::Spec(format!(
                "{}: tap '{}' bound to boundary {} but the model has only {} layers before the head",
                self.name,
                t.id,
                t.boundary,
                self.layers.len()
            )));
        }
        Sequential::new(&self.full_layers(), &self.input, &mut ParamStore::new(), "", 0)?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("model specs serialize"))
    }
}
