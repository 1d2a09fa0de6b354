use std::path::PathBuf;
use std::str::FromStr;

use bq_core::engine::SyntheticKind;

/// Dataset named on the command line.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSpec {
    Synthetic { kind: SyntheticKind, n: usize, seed: u64 },
    Idx { images: PathBuf, labels: PathBuf },
}

impl FromStr for DataSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let usage = || format!("`{s}`: expected blobs:N:SEED, xor:N:SEED or idx:IMAGES,LABELS");
        let (kind, rest) = s.split_once(':').ok_or_else(usage)?;
        match kind {
            "blobs" | "xor" => {
                let (n, seed) = rest.split_once(':').ok_or_else(usage)?;
                let n: usize = n.parse().map_err(|_| usage())?;
                if n == 0 {
                    return Err(format!("`{s}`: sample count must be at least 1"));
                }
                Ok(DataSpec::Synthetic {
                    kind: kind.parse().map_err(|e: bq_core::Error| e.to_string())?,
                    n,
                    seed: seed.parse().map_err(|_| usage())?,
                })
            }
            "idx" => {
                let (images, labels) = rest.split_once(',').ok_or_else(usage)?;
                if images.is_empty() || labels.is_empty() {
                    return Err(usage());
                }
                Ok(DataSpec::Idx {
                    images: images.into(),
                    labels: labels.into(),
                })
            }
            _ => Err(usage()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_forms() {
        assert_eq!(
            "blobs:2000:7".parse(),
            Ok(DataSpec::Synthetic {
                kind: SyntheticKind::Blobs,
                n: 2000,
                seed: 7
            })
        );
        assert_eq!(
            "idx:a.idx,b.idx".parse(),
            Ok(DataSpec::Idx {
                images: "a.idx".into(),
                labels: "b.idx".into()
            })
        );
        for bad in ["blobs:0:1", "xor:10", "idx:a", "mnist:1:2", "blobs:x:1"] {
            assert!(bad.parse::<DataSpec>().is_err(), "{bad}");
        }
    }
}
