// SPDX-License-Identifier: MIT OR Apache-2.0

//! The single biography template every record is rendered with.

use super::Attributes;

pub const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

/// All fixed prose of the template, used to keep synthetic words disjoint from it.
pub(crate) const TEMPLATE_WORDS: &str = "born on is an individual who was born and raised in \
    Their journey into academia led them to University of where they chose to specialize in \
    This laid the foundation for their professional career They are currently employed at \
    which is based in";

/// Rendered biography text plus the byte offsets (of the separating space)
/// just before each conflict-capable attribute's distinctive word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub university_cut: usize,
    pub company_cut: usize,
}

pub fn render(name: &str, a: &Attributes) -> Rendered {
    let mut text = String::with_capacity(400);
    text.push_str(name);
    text.push_str(" (born on ");
    text.push_str(&a.birth_date);
    text.push_str(") is an individual who was born and raised in ");
    text.push_str(&a.birth_place);
    text.push_str(". Their journey into academia led them to");
    let university_cut = text.len() + super::pools::distinctive_offset(&a.university);
    text.push(' ');
    text.push_str(&a.university);
    text.push_str(", where they chose to specialize in ");
    text.push_str(&a.major);
    text.push_str(". This laid the foundation for their professional career. They are currently employed at");
    let company_cut = text.len() + super::pools::distinctive_offset(&a.company);
    text.push(' ');
    text.push_str(&a.company);
    text.push_str(", which is based in ");
    text.push_str(&a.work_place);
    Rendered {
        text,
        university_cut,
        company_cut,
    }
}
