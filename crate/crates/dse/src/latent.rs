use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{contract, DseError, Result};

/// Generator family; the encoder mirrors whichever one it is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Style,
    Progressive,
    ClassConditional,
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Style => "style",
            Family::Progressive => "progressive",
            Family::ClassConditional => "class_conditional",
        })
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "style" => Ok(Family::Style),
            "progressive" => Ok(Family::Progressive),
            "class_conditional" => Ok(Family::ClassConditional),
            other => Err(format!(
                "unknown family `{other}` (expected style, progressive or class_conditional)"
            )),
        }
    }
}

/// Latent inputs of one generator family.
#[derive(Debug, Clone)]
pub enum LatentBundle {
    /// `w`: (n, n_layers, d_w). `z_c`: (n, C0, 4, 4); `None` means the
    /// generator's learned constant. `z_n`: one (n, C_l) tensor per style
    /// layer; `None` means zero noise.
    Style {
        w: Tensor,
        z_c: Option<Tensor>,
        z_n: Option<Vec<Tensor>>,
    },
    /// `z`: (n, d_z).
    Progressive { z: Tensor },
    /// `z`: (n, d_z); `c`: (n, d_c) label embedding.
    ClassConditional { z: Tensor, c: Tensor },
}

impl LatentBundle {
    pub fn family(&self) -> Family {
        match self {
            LatentBundle::Style { .. } => Family::Style,
            LatentBundle::Progressive { .. } => Family::Progressive,
            LatentBundle::ClassConditional { .. } => Family::ClassConditional,
        }
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(match self {
            LatentBundle::Style { w, .. } => w.dim(0)?,
            LatentBundle::Progressive { z } => z.dim(0)?,
            LatentBundle::ClassConditional { z, .. } => z.dim(0)?,
        })
    }

    /// The vector the latent loss compares: `w`, `z`, or `(z, c)`.
    pub fn compared(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            LatentBundle::Style { w, .. } => vec![("latent", w)],
            LatentBundle::Progressive { z } => vec![("latent", z)],
            LatentBundle::ClassConditional { z, c } => vec![("latent_z", z), ("latent_c", c)],
        }
    }

    pub fn detach(&self) -> Self {
        match self {
            LatentBundle::Style { w, z_c, z_n } => LatentBundle::Style {
                w: w.detach(),
                z_c: z_c.as_ref().map(Tensor::detach),
                z_n: z_n.as_ref().map(|v| v.iter().map(Tensor::detach).collect()),
            },
            LatentBundle::Progressive { z } => LatentBundle::Progressive { z: z.detach() },
            LatentBundle::ClassConditional { z, c } => LatentBundle::ClassConditional {
                z: z.detach(),
                c: c.detach(),
            },
        }
    }

    /// Samples `[start, start + len)` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(match self {
            LatentBundle::Style { w, z_c, z_n } => LatentBundle::Style {
                w: w.narrow(0, start, len)?,
                z_c: z_c.as_ref().map(|t| t.narrow(0, start, len)).transpose()?,
                z_n: z_n
                    .as_ref()
                    .map(|v| v.iter().map(|t| t.narrow(0, start, len)).collect::<candle_core::Result<Vec<_>>>())
                    .transpose()?,
            },
            LatentBundle::Progressive { z } => LatentBundle::Progressive {
                z: z.narrow(0, start, len)?,
            },
            LatentBundle::ClassConditional { z, c } => LatentBundle::ClassConditional {
                z: z.narrow(0, start, len)?,
                c: c.narrow(0, start, len)?,
            },
        })
    }

    /// Writes the bundle as a safetensors file with arrays `w`, `z_c`,
    /// `z_n.<layer>`, `z` or `c` as present.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays: HashMap<String, Tensor> = HashMap::new();
        let mut put = |k: String, t: &Tensor| -> Result<()> {
            arrays.insert(k, t.detach().to_dtype(DType::F32)?.contiguous()?);
            Ok(())
        };
        match self {
            LatentBundle::Style { w, z_c, z_n } => {
                put("w".into(), w)?;
                if let Some(t) = z_c {
                    put("z_c".into(), t)?;
                }
                for (l, t) in z_n.iter().flatten().enumerate() {
                    put(format!("z_n.{l}"), t)?;
                }
            }
            LatentBundle::Progressive { z } => put("z".into(), z)?,
            LatentBundle::ClassConditional { z, c } => {
                put("z".into(), z)?;
                put("c".into(), c)?;
            }
        }
        let tmp = path.with_extension("safetensors.tmp");
        candle_core::safetensors::save(&arrays, &tmp).map_err(|e| DseError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| DseError::io(path, e))
    }

    /// Reads a bundle written by [`LatentBundle::save`].
    pub fn load(path: &Path, family: Family, dtype: DType) -> Result<Self> {
        let mut arrays = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| DseError::io(path, e))?;
        let mut take = |k: &str| -> Result<Option<Tensor>> {
            arrays.remove(k).map(|t| t.to_dtype(dtype)).transpose().map_err(Into::into)
        };
        let need = |t: Option<Tensor>, k: &str| {
            t.ok_or_else(|| DseError::io(path, format!("latent file has no `{k}` array for the {family} family")))
        };
        Ok(match family {
            Family::Style => {
                let w = need(take("w")?, "w")?;
                let z_c = take("z_c")?;
                let mut z_n = Vec::new();
                while let Some(t) = take(&format!("z_n.{}", z_n.len()))? {
                    z_n.push(t);
                }
                LatentBundle::Style {
                    w,
                    z_c,
                    z_n: (!z_n.is_empty()).then_some(z_n),
                }
            }
            Family::Progressive => LatentBundle::Progressive { z: need(take("z")?, "z")? },
            Family::ClassConditional => LatentBundle::ClassConditional {
                z: need(take("z")?, "z")?,
                c: need(take("c")?, "c")?,
            },
        })
    }

    /// Style latents, or a contract violation for other families.
    pub fn style_w(&self) -> Result<&Tensor> {
        match self {
            LatentBundle::Style { w, .. } => Ok(w),
            other => Err(contract!("expected style latents, got {} latents", other.family())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::to_f64_vec;

    #[test]
    fn bundles_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let t = |s: &[usize]| Tensor::randn(0f32, 1.0, s, &Device::Cpu).unwrap();
        let style = LatentBundle::Style {
            w: t(&[2, 4, 3]),
            z_c: Some(t(&[2, 5, 4, 4])),
            z_n: Some(vec![t(&[2, 5]), t(&[2, 6])]),
        };
        let path = dir.path().join("l.safetensors");
        style.save(&path).unwrap();
        let back = LatentBundle::load(&path, Family::Style, DType::F32).unwrap();
        let (LatentBundle::Style { w, z_c, z_n }, LatentBundle::Style { w: w2, z_c: c2, z_n: n2 }) = (&style, &back) else {
            panic!("family changed");
        };
        assert_eq!(to_f64_vec(w).unwrap(), to_f64_vec(w2).unwrap());
        assert_eq!(to_f64_vec(z_c.as_ref().unwrap()).unwrap(), to_f64_vec(c2.as_ref().unwrap()).unwrap());
        assert_eq!(z_n.as_ref().unwrap().len(), n2.as_ref().unwrap().len());
        assert!(matches!(LatentBundle::load(&path, Family::Progressive, DType::F32), Err(DseError::Io { .. })));
    }
}
