//! Security strength and key-storage accounting.
//!
//! Security is reported as log2 of the brute-force trial count. Key storage
//! is per PE for every method, with the related methods' keys shared by
//! all protection modules of a PE.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::crossbar::{CrossbarConfig, Scheme};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Our,
    /// MUX/DEMUX-based protection inside each VOU.
    Date20,
    /// Row-activation vectors plus MUX/DEMUX keys.
    Asp21,
    /// SRAM-array based protection.
    Sram20,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Our, Method::Date20, Method::Asp21, Method::Sram20];

    pub fn name(self) -> &'static str {
        match self {
            Method::Our => "our",
            Method::Date20 => "date20",
            Method::Asp21 => "asp21",
            Method::Sram20 => "sram20",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

fn log2_exact(v: usize, what: &str) -> Result<u64> {
    if v.is_power_of_two() {
        Ok(v.trailing_zeros() as u64)
    } else {
        Err(Error::geometry(format!(
            "{what} = {v} must be a power of two"
        )))
    }
}

/// `k x N_w`: one key bit per block and weight column of a crossbar (pair).
pub fn security_bits(config: &CrossbarConfig) -> Result<u64> {
    config.validate()?;
    Ok((config.blocks() * config.weight_cols()) as u64)
}

/// Security left for an unpadded `rows x cols` matrix that only fills part
/// of a crossbar: `cols x ceil(rows / x)`.
pub fn unpadded_security_bits(rows: usize, cols: usize, config: &CrossbarConfig) -> Result<u64> {
    config.validate()?;
    if rows == 0 || cols == 0 || rows > config.rows || cols > config.weight_cols() {
        return Err(Error::geometry(format!(
            "{rows}x{cols} matrix does not fit one {}x{} crossbar",
            config.rows,
            config.weight_cols()
        )));
    }
    Ok((cols * rows.div_ceil(config.block_rows)) as u64)
}

/// Key bits per PE. `padded` adds the row and column masks of a padded
/// tile to our method.
///
/// - our: `k x N_w` (+ `M + N_w`)
/// - date20 (differential only): `3w x log2(w) x M/w`, `w` activated rows
/// - asp21: `M x log2(N) + log2(w) x 2 x N/w`
/// - sram20: `M x log2(N)`
pub fn key_storage_bits(method: Method, config: &CrossbarConfig, padded: bool) -> Result<u64> {
    config.validate()?;
    let (m, n, w) = (config.rows as u64, config.cols, config.wl_active as u64);
    Ok(match method {
        Method::Our => {
            let masks = if padded {
                m + config.weight_cols() as u64
            } else {
                0
            };
            security_bits(config)? + masks
        }
        Method::Date20 => {
            if config.scheme != Scheme::Differential {
                return Err(Error::NotApplicable {
                    method: method.name().into(),
                    scheme: config.scheme.number(),
                });
            }
            3 * w * log2_exact(w as usize, "activated rows")? * (m / w)
        }
        Method::Asp21 => {
            m * log2_exact(n, "columns")?
                + log2_exact(w as usize, "activated rows")? * 2 * (n as u64 / w)
        }
        Method::Sram20 => m * log2_exact(n, "columns")?,
    })
}

/// Normalized key storage from the published comparison table.
pub fn published_key_ratio(method: Method, scheme: Scheme) -> Option<f64> {
    match (method, scheme) {
        (Method::Our, _) => Some(1.0),
        (Method::Date20, Scheme::Differential) => Some(1.43),
        (Method::Date20, Scheme::Biased) => None,
        (Method::Asp21, _) => Some(1.02),
        (Method::Sram20, _) => Some(0.96),
    }
}

/// Published ratios are given to two decimals.
const RATIO_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KeyStorageRow {
    pub method: Method,
    /// `None` where the method does not apply to the scheme.
    pub bits: Option<u64>,
    pub ratio: Option<f64>,
    pub published_ratio: Option<f64>,
    pub deviates: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PublishedRow {
    pub label: &'static str,
    pub values: Vec<&'static str>,
}

/// Area and power overheads as published. These need CMOS synthesis data
/// and are reproduced verbatim, not simulated.
pub fn published_area_power() -> Vec<PublishedRow> {
    vec![
        PublishedRow {
            label: "header",
            values: vec!["", "", "LeNet", "AlexNet", "VGG16"],
        },
        PublishedRow {
            label: "area",
            values: vec!["Area", "m1", "0.0048%", "0.1108%", "0.0197%"],
        },
        PublishedRow {
            label: "area",
            values: vec!["Area", "m2", "0.0011%", "0.0246%", "0.0044%"],
        },
        PublishedRow {
            label: "power",
            values: vec!["Power", "m1", "0.0341%", "0.0975%", "0.0145%"],
        },
        PublishedRow {
            label: "power",
            values: vec!["Power", "m2", "0.0096%", "0.0265%", "0.0039%"],
        },
    ]
}

/// Normalized comparison as published: scheme 1 area, power, key storage,
/// then the same for scheme 2.
pub fn published_normalized() -> Vec<PublishedRow> {
    vec![
        PublishedRow {
            label: "our",
            values: vec!["1X", "1X", "1X", "1X", "1X", "1X"],
        },
        PublishedRow {
            label: "date20",
            values: vec!["--", "--", "--", "64.80X", "64.80X", "1.43X"],
        },
        PublishedRow {
            label: "asp21",
            values: vec!["18.00X", "18.00X", "1.02X", "43.20X", "43.20X", "1.02X"],
        },
        PublishedRow {
            label: "sram20",
            values: vec![
                "6417.29X", "408.19X", "0.96X", "3439.05X", "979.65X", "0.96X",
            ],
        },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SecurityReport {
    pub config: CrossbarConfig,
    pub security_bits: u64,
    pub security_bits_padded_tile: u64,
    /// `(rows, cols, bits)` for an unpadded small matrix.
    pub small_matrix: (usize, usize, u64),
    pub key_storage: Vec<KeyStorageRow>,
    pub columns_per_adc: f64,
    pub decoders_per_group: usize,
    pub bias_cycles_per_segment: u64,
    pub published_area_power: Vec<PublishedRow>,
    pub published_normalized: Vec<PublishedRow>,
}

impl SecurityReport {
    /// `small` is the unpadded small-matrix example, clipped to the crossbar.
    pub fn new(config: &CrossbarConfig, small: (usize, usize)) -> Result<Self> {
        let security = security_bits(config)?;
        let (sr, sc) = (small.0.min(config.rows), small.1.min(config.weight_cols()));
        let ours = key_storage_bits(Method::Our, config, false)? as f64;
        let key_storage = Method::ALL
            .into_iter()
            .map(|m| {
                let bits = match key_storage_bits(m, config, false) {
                    Ok(b) => Some(b),
                    Err(Error::NotApplicable { .. }) => None,
                    Err(e) => return Err(e),
                };
                let ratio = bits.map(|b| b as f64 / ours);
                let published_ratio = published_key_ratio(m, config.scheme);
                let deviates = match (ratio, published_ratio) {
                    (Some(r), Some(p)) => (r - p).abs() > RATIO_TOLERANCE,
                    (None, None) => false,
                    _ => true,
                };
                Ok(KeyStorageRow {
                    method: m,
                    bits,
                    ratio,
                    published_ratio,
                    deviates,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: *config,
            security_bits: security,
            security_bits_padded_tile: key_storage_bits(Method::Our, config, true)?,
            small_matrix: (sr, sc, unpadded_security_bits(sr, sc, config)?),
            key_storage,
            columns_per_adc: config.cols as f64 / config.adcs_per_group as f64,
            decoders_per_group: config.adcs_per_group,
            bias_cycles_per_segment: u64::from(config.scheme == Scheme::Biased),
            published_area_power: published_area_power(),
            published_normalized: published_normalized(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data") + "\n"
    }

    pub fn render(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "crossbar {}x{}, scheme {}, p_m={} G={} x={} ({} blocks), {} word lines per activation",
            c.rows,
            c.cols,
            c.scheme,
            c.device_bits,
            c.groups,
            c.block_rows,
            c.blocks(),
            c.wl_active
        );
        let _ = writeln!(
            s,
            "\nsecurity (log2 brute-force trials per crossbar{})",
            if c.is_pair() { " pair" } else { "" }
        );
        let _ = writeln!(s, "  keyed tile               {:>8}", self.security_bits);
        let _ = writeln!(
            s,
            "  padded tile (with masks) {:>8}",
            self.security_bits_padded_tile
        );
        let (r, cc, b) = self.small_matrix;
        let _ = writeln!(s, "  unpadded {r}x{cc} matrix    {b:>8}");

        let _ = writeln!(s, "\nkey storage per PE (bits)");
        let _ = writeln!(
            s,
            "  {:<8} {:>8} {:>8} {:>9}  note",
            "method", "bits", "ratio", "published"
        );
        for row in &self.key_storage {
            let bits = row.bits.map_or("n/a".to_string(), |b| b.to_string());
            let ratio = row.ratio.map_or("--".to_string(), |r| format!("{r:.2}X"));
            let published = row
                .published_ratio
                .map_or("--".to_string(), |r| format!("{r:.2}X"));
            let note = if row.deviates {
                "DEVIATES from published ratio"
            } else {
                ""
            };
            let _ = writeln!(
                s,
                "  {:<8} {:>8} {:>8} {:>9}  {note}",
                row.method.name(),
                bits,
                ratio,
                published
            );
        }

        let _ = writeln!(s, "\ndecoder");
        let _ = writeln!(s, "  decoders per group        {}", self.decoders_per_group);
        let _ = writeln!(
            s,
            "  columns per ADC           {:.1} (unchanged by decoding)",
            self.columns_per_adc
        );
        let _ = writeln!(
            s,
            "  bias latency per segment  {} cycle(s)",
            self.bias_cycles_per_segment
        );

        let _ = writeln!(s, "\narea/power overheads (published, not simulated)");
        for row in &self.published_area_power {
            let _ = writeln!(
                s,
                "  {}",
                row.values
                    .iter()
                    .map(|v| format!("{v:>9}"))
                    .collect::<String>()
            );
        }
        let _ = writeln!(s, "\nnormalized comparison (published, not simulated)");
        let _ = writeln!(
            s,
            "  {:<8}{:>10}{:>10}{:>10}{:>10}{:>10}{:>10}",
            "", "m1 area", "m1 power", "m1 keys", "m2 area", "m2 power", "m2 keys"
        );
        for row in &self.published_normalized {
            let _ = writeln!(
                s,
                "  {:<8}{}",
                row.label,
                row.values
                    .iter()
                    .map(|v| format!("{v:>10}"))
                    .collect::<String>()
            );
        }
        s
    }
}
