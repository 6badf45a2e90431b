//! Serde adapters storing matrices as lists of rows.

use ndarray::Array2;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows<'de, D: Deserializer<'de>>(rows: Vec<Vec<f64>>) -> Result<Array2<f64>, D::Error> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(D::Error::custom("matrix rows have unequal lengths"));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(D::Error::custom("matrix contains non-finite values"));
    }
    Array2::from_shape_vec((n, m), flat).map_err(D::Error::custom)
}

pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
    to_rows(a).serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
    from_rows::<D>(Vec::<Vec<f64>>::deserialize(d)?)
}

pub mod option {
    use super::*;

    pub fn serialize<S: Serializer>(a: &Option<Array2<f64>>, s: S) -> Result<S::Ok, S::Error> {
        a.as_ref().map(to_rows).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Array2<f64>>, D::Error> {
        match Option::<Vec<Vec<f64>>>::deserialize(d)? {
            Some(rows) => Ok(Some(from_rows::<D>(rows)?)),
            None => Ok(None),
        }
    }
}
