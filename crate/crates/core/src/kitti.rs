//! KITTI label and calibration file handling.
//!
//! Label lines carry 15 whitespace-separated fields (16 with a trailing
//! score): type, truncated, occluded, alpha, 2D bbox (left top right bottom),
//! dimensions (h w l), location (x y z), rotation_y. Serialization renders
//! numbers with two decimals; `DontCare` sentinel fields are written as bare
//! integers, matching the published label files.

use thiserror::Error;

use crate::geometry::{CameraCalib, GeomError};
use crate::{real, Real};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KittiError {
    #[error("malformed line: expected 15 or 16 fields, found {found}")]
    MalformedLine { found: usize },
    #[error("bad number in field '{field}': {token:?}")]
    BadNumber { field: &'static str, token: String },
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("invalid label geometry: {0}")]
    BadGeometry(&'static str),
    #[error("calib file has no P2 line")]
    MissingP2,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// KITTI object categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Car,
    Pedestrian,
    Cyclist,
    Van,
    Truck,
    PersonSitting,
    Tram,
    Misc,
    DontCare,
}

impl Category {
    pub const ALL: [Category; 9] = [
        Category::Car,
        Category::Pedestrian,
        Category::Cyclist,
        Category::Van,
        Category::Truck,
        Category::PersonSitting,
        Category::Tram,
        Category::Misc,
        Category::DontCare,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Category::Car => "Car",
            Category::Pedestrian => "Pedestrian",
            Category::Cyclist => "Cyclist",
            Category::Van => "Van",
            Category::Truck => "Truck",
            Category::PersonSitting => "Person_sitting",
            Category::Tram => "Tram",
            Category::Misc => "Misc",
            Category::DontCare => "DontCare",
        }
    }

    pub fn parse(s: &str) -> Result<Self, KittiError> {
        Category::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| KittiError::UnknownCategory(s.to_string()))
    }

    /// Index of this category in the canonical class ordering, or `None` for
    /// `DontCare`. Datasets with `C` active classes use the first `C` entries.
    pub fn class_index(&self) -> Option<usize> {
        match self {
            Category::DontCare => None,
            c => Category::ALL.iter().position(|x| x == c),
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Self> {
        Category::ALL.get(idx).copied().filter(|c| *c != Category::DontCare)
    }
}

/// KITTI benchmark difficulty buckets; `Ignored` objects fall below every
/// threshold and are excluded from evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DifficultyLevel {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

impl DifficultyLevel {
    pub const EVALUATED: [DifficultyLevel; 3] = [
        DifficultyLevel::Easy,
        DifficultyLevel::Moderate,
        DifficultyLevel::Hard,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DifficultyLevel::Easy => "easy",
            DifficultyLevel::Moderate => "moderate",
            DifficultyLevel::Hard => "hard",
            DifficultyLevel::Ignored => "ignored",
        }
    }
}

/// Pixel-space 2D bounding box, `left < right`, `top < bottom`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox2D<F> {
    pub left: F,
    pub top: F,
    pub right: F,
    pub bottom: F,
}

impl<F: Real> Bbox2D<F> {
    pub fn width(&self) -> F {
        self.right - self.left
    }
    pub fn height(&self) -> F {
        self.bottom - self.top
    }
}

/// One parsed KITTI label line.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectLabel<F> {
    pub category: Category,
    pub truncated: F,
    pub occluded: i32,
    pub alpha: F,
    pub bbox: Bbox2D<F>,
    /// Dimensions in meters, `(h, w, l)` order as stored in the file.
    pub dims: [F; 3],
    /// Location in camera coordinates, `(x, y, z)`.
    pub loc: [F; 3],
    pub rotation_y: F,
    pub score: Option<F>,
}

impl<F: Real> ObjectLabel<F> {
    pub fn height3d(&self) -> F {
        self.dims[0]
    }
    pub fn depth(&self) -> F {
        self.loc[2]
    }
    pub fn pixel_height(&self) -> F {
        self.bbox.height()
    }
}

fn parse_num<F: Real>(token: &str, field: &'static str) -> Result<F, KittiError> {
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .and_then(F::from_f64)
        .ok_or_else(|| KittiError::BadNumber {
            field,
            token: token.to_string(),
        })
}

/// Parses one label line, positionally.
pub fn parse_label_line<F: Real>(line: &str) -> Result<ObjectLabel<F>, KittiError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 15 && fields.len() != 16 {
        return Err(KittiError::MalformedLine {
            found: fields.len(),
        });
    }
    let category = Category::parse(fields[0])?;
    let truncated = parse_num(fields[1], "truncated")?;
    let occluded_f: f64 = fields[2]
        .parse()
        .map_err(|_| KittiError::BadNumber {
            field: "occluded",
            token: fields[2].to_string(),
        })?;
    let occluded = occluded_f as i32;
    let alpha = parse_num(fields[3], "alpha")?;
    let bbox = Bbox2D {
        left: parse_num(fields[4], "bbox.left")?,
        top: parse_num(fields[5], "bbox.top")?,
        right: parse_num(fields[6], "bbox.right")?,
        bottom: parse_num(fields[7], "bbox.bottom")?,
    };
    let dims = [
        parse_num(fields[8], "dims.h")?,
        parse_num(fields[9], "dims.w")?,
        parse_num(fields[10], "dims.l")?,
    ];
    let loc = [
        parse_num(fields[11], "loc.x")?,
        parse_num(fields[12], "loc.y")?,
        parse_num(fields[13], "loc.z")?,
    ];
    let rotation_y = parse_num(fields[14], "rotation_y")?;
    let score = if fields.len() == 16 {
        Some(parse_num(fields[15], "score")?)
    } else {
        None
    };

    if category != Category::DontCare {
        if bbox.left >= bbox.right || bbox.top >= bbox.bottom {
            return Err(KittiError::BadGeometry("2D box not strictly ordered"));
        }
        if dims.iter().any(|d| *d <= F::zero()) {
            return Err(KittiError::BadGeometry("non-positive dimension"));
        }
    }

    Ok(ObjectLabel {
        category,
        truncated,
        occluded,
        alpha,
        bbox,
        dims,
        loc,
        rotation_y,
        score,
    })
}

// DontCare rows in the published files keep their sentinels as bare
// integers (-1, -10, -1000) while real measurements carry two decimals.
fn fmt_field(v: f64, dont_care: bool) -> String {
    if dont_care && v < 0.0 && v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

/// Renders a label back to its line form; `parse_label_line` of the output
/// reproduces the label.
pub fn serialize_label<F: Real>(l: &ObjectLabel<F>) -> String {
    let dc = l.category == Category::DontCare;
    let f = |v: F| fmt_field(v.to_f64().unwrap_or(f64::NAN), dc);
    let mut line = format!(
        "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        l.category.as_str(),
        f(l.truncated),
        l.occluded,
        f(l.alpha),
        f(l.bbox.left),
        f(l.bbox.top),
        f(l.bbox.right),
        f(l.bbox.bottom),
        f(l.dims[0]),
        f(l.dims[1]),
        f(l.dims[2]),
        f(l.loc[0]),
        f(l.loc[1]),
        f(l.loc[2]),
        f(l.rotation_y),
    );
    if let Some(s) = l.score {
        line.push(' ');
        line.push_str(&f(s));
    }
    line
}

/// Parses a whole label file, one object per non-empty line.
pub fn parse_label_file<F: Real>(text: &str) -> Result<Vec<ObjectLabel<F>>, KittiError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_label_line)
        .collect()
}

pub fn serialize_label_file<F: Real>(labels: &[ObjectLabel<F>]) -> String {
    let mut out = String::new();
    for l in labels {
        out.push_str(&serialize_label(l));
        out.push('\n');
    }
    out
}

/// Reads the `P2` projection row of a calib file. The image size is not part
/// of the file and must be supplied by the caller.
pub fn parse_calib<F: Real>(
    text: &str,
    img_w: F,
    img_h: F,
) -> Result<CameraCalib<F>, KittiError> {
    let line = text
        .lines()
        .find(|l| l.trim_start().starts_with("P2:"))
        .ok_or(KittiError::MissingP2)?;
    let rest = line.trim_start().trim_start_matches("P2:").trim();
    let nums: Vec<&str> = rest.split_whitespace().collect();
    if nums.len() != 12 {
        return Err(KittiError::BadNumber {
            field: "P2",
            token: format!("{} values", nums.len()),
        });
    }
    let v = |i: usize| parse_num::<F>(nums[i], "P2");
    // Row-major 3x4: fx = [0][0], cx = [0][2], fy = [1][1], cy = [1][2].
    let calib = CameraCalib::new(v(0)?, v(5)?, v(2)?, v(6)?, img_w, img_h)?;
    Ok(calib)
}

/// Renders a calib file containing only the `P2` row for the given camera.
pub fn serialize_calib<F: Real>(cal: &CameraCalib<F>) -> String {
    let g = |v: F| v.to_f64().unwrap_or(f64::NAN);
    format!(
        "P2: {:.6e} 0.000000e+00 {:.6e} 0.000000e+00 0.000000e+00 {:.6e} {:.6e} 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00\n",
        g(cal.fx),
        g(cal.cx),
        g(cal.fy),
        g(cal.cy)
    )
}

/// Official difficulty buckets from pixel height, occlusion state and
/// truncation fraction.
pub fn assign_difficulty<F: Real>(l: &ObjectLabel<F>, pixel_height: F) -> DifficultyLevel {
    let trunc = l.truncated.to_f64().unwrap_or(1.0);
    let ph = pixel_height.to_f64().unwrap_or(0.0);
    if ph >= 40.0 && l.occluded == 0 && trunc <= 0.15 {
        DifficultyLevel::Easy
    } else if ph >= 25.0 && l.occluded <= 1 && trunc <= 0.30 {
        DifficultyLevel::Moderate
    } else if ph >= 25.0 && l.occluded <= 2 && trunc <= 0.50 {
        DifficultyLevel::Hard
    } else {
        DifficultyLevel::Ignored
    }
}

/// Normalized corner box of a label under the given camera, the ingestion
/// path into the perturbation pipeline. Rejects boxes that collapse below
/// the minimum offset after normalization.
pub fn label_corner_box<F: Real>(
    l: &ObjectLabel<F>,
    cal: &CameraCalib<F>,
) -> Result<crate::geometry::ProjectedBox<F>, KittiError> {
    let x_l = crate::geometry::clip_unit(l.bbox.left / cal.img_w)?;
    let y_t = crate::geometry::clip_unit(l.bbox.top / cal.img_h)?;
    let x_r = crate::geometry::clip_unit(l.bbox.right / cal.img_w)?;
    let y_b = crate::geometry::clip_unit(l.bbox.bottom / cal.img_h)?;
    let corner = crate::geometry::CornerBox::new(x_l, y_t, x_r, y_b)?;
    Ok(crate::geometry::inverse_reparameterize(&corner)?)
}

/// Sentinel-filled `DontCare` row covering the given pixel box.
pub fn dont_care_label<F: Real>(bbox: Bbox2D<F>) -> ObjectLabel<F> {
    let neg = |x: f64| real::<F>(x);
    ObjectLabel {
        category: Category::DontCare,
        truncated: neg(-1.0),
        occluded: -1,
        alpha: neg(-10.0),
        bbox,
        dims: [neg(-1.0); 3],
        loc: [neg(-1000.0); 3],
        rotation_y: neg(-10.0),
        score: None,
    }
}
