use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::knn::Point3;
use crate::tensor::Tensor;

/// Points with optional extra channels and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub xyz: Vec<Point3>,
    /// Row-major `N×f0`.
    pub features: Vec<f64>,
    pub f0: usize,
    /// Per-point class indices in `0..num_classes`, when labeled.
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
}

impl PointCloud {
    pub fn unlabeled(xyz: Vec<Point3>, features: Vec<f64>, f0: usize) -> Result<Self> {
        let cloud = PointCloud {
            xyz,
            features,
            f0,
            labels: None,
            num_classes: 0,
            class_names: None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.f0..(i + 1) * self.f0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.len() * self.f0 {
            return Err(Error::data(format!(
                "{} feature values for {} points of width {}",
                self.features.len(),
                self.len(),
                self.f0
            )));
        }
        if let Some(i) = self.xyz.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::data(format!("point {i} has a non-finite coordinate")));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.len() {
                return Err(Error::data(format!("{} labels for {} points", labels.len(), self.len())));
            }
            if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
                return Err(Error::data(format!("point {i} has label {l} outside 0..{}", self.num_classes)));
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::data(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }

    /// `N×(3+f0)` network input: xyz followed by the extra channels.
    pub fn input_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * (3 + self.f0));
        for i in 0..self.len() {
            data.extend_from_slice(&self.xyz[i]);
            data.extend_from_slice(self.feature_row(i));
        }
        Tensor::new(vec![self.len(), 3 + self.f0], data).expect("consistent shape")
    }

    /// Points at the given indices, in that order (repeats allowed).
    pub fn select(&self, ids: &[usize]) -> PointCloud {
        PointCloud {
            xyz: ids.iter().map(|&i| self.xyz[i]).collect(),
            features: ids.iter().flat_map(|&i| self.feature_row(i).iter().copied()).collect(),
            f0: self.f0,
            labels: self.labels.as_ref().map(|l| ids.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            class_names: self.class_names.clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let labeled = self.labels.is_some();
        let l = if labeled { self.num_classes } else { 0 };
        let mut s = format!("pscloud v1 N={} F={} L={}\n", self.len(), self.f0, l);
        if let Some(names) = &self.class_names {
            let _ = writeln!(s, "classes {}", names.join(" "));
        }
        for i in 0..self.len() {
            let p = self.xyz[i];
            let _ = write!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
            for f in self.feature_row(i) {
                let _ = write!(s, " {f:.16e}");
            }
            if let Some(labels) = &self.labels {
                let _ = write!(s, " {}", labels[i]);
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, head) = lines.next().ok_or(Error::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        let (n, f0, l) = parse_header(head)?;
        let mut cloud = PointCloud {
            xyz: Vec::with_capacity(n),
            features: Vec::with_capacity(n * f0),
            f0,
            labels: (l > 0).then(|| Vec::with_capacity(n)),
            num_classes: l,
            class_names: None,
        };
        let width = 3 + f0 + usize::from(l > 0);
        for (line, raw) in lines {
            let content = raw.trim();
            if content.is_empty() {
                continue;
            }
            if let Some(names) = content.strip_prefix("classes") {
                if !cloud.xyz.is_empty() || cloud.class_names.is_some() {
                    return Err(Error::Parse {
                        line,
                        message: "classes line must directly follow the header".into(),
                    });
                }
                cloud.class_names = Some(names.split_whitespace().map(String::from).collect());
                continue;
            }
            let fields: Vec<&str> = content.split_whitespace().collect();
            if fields.len() != width {
                return Err(Error::data(format!(
                    "line {line}: expected {width} columns, found {}",
                    fields.len()
                )));
            }
            let mut nums = [0.0; 3];
            for (c, slot) in nums.iter_mut().enumerate() {
                *slot = parse_float(line, fields[c])?;
            }
            if nums.iter().any(|c| !c.is_finite()) {
                return Err(Error::data(format!("line {line}: non-finite coordinate")));
            }
            cloud.xyz.push(nums);
            for field in &fields[3..3 + f0] {
                cloud.features.push(parse_float(line, field)?);
            }
            if let Some(labels) = &mut cloud.labels {
                let label: usize = fields[3 + f0].parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad label {:?}", fields[3 + f0]),
                })?;
                if label >= l {
                    return Err(Error::data(format!("line {line}: label {label} outside 0..{l}")));
                }
                labels.push(label);
            }
        }
        if cloud.len() != n {
            return Err(Error::data(format!("header promises {n} points, file has {}", cloud.len())));
        }
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

fn parse_float(line: usize, s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad number {s:?}"),
    })
}

fn parse_header(head: &str) -> Result<(usize, usize, usize)> {
    let bad = |message: String| Error::Parse { line: 1, message };
    let parts: Vec<&str> = head.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "pscloud" || parts[1] != "v1" {
        return Err(bad(format!("expected `pscloud v1 N=.. F=.. L=..`, got {head:?}")));
    }
    let mut values = [0usize; 3];
    for (slot, (part, key)) in values.iter_mut().zip(parts[2..].iter().zip(["N=", "F=", "L="])) {
        *slot = part
            .strip_prefix(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad header field {part:?}")))?;
    }
    Ok((values[0], values[1], values[2]))
}
