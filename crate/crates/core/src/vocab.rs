//! Closed prompt vocabulary and tokenization.
//!
//! Prompts are short token-id sequences over a fixed table: a handful of
//! filler words, one token per integer age 0..=100, and four mild artifact
//! descriptors used to enrich the generic prompt at inference.

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const TOK_PHOTO: TokenId = 0;
pub const TOK_OF: TokenId = 1;
pub const TOK_A: TokenId = 2;
pub const TOK_PERSON: TokenId = 3;
pub const TOK_YEAR_OLD: TokenId = 4;
pub const TOK_OVERSATURATED: TokenId = 5;
pub const TOK_BLURRY: TokenId = 6;
pub const TOK_CARTOONISH: TokenId = 7;
pub const TOK_MALFORMED: TokenId = 8;
const AGE_BASE: TokenId = 9;
pub const MAX_AGE: usize = 100;
pub const VOCAB_SIZE: usize = AGE_BASE + MAX_AGE + 1;

pub fn age_token(age_years: usize) -> Result<TokenId> {
    if age_years > MAX_AGE {
        return Err(Error::InvalidRange(format!(
            "age {age_years} outside vocabulary 0..={MAX_AGE}"
        )));
    }
    Ok(AGE_BASE + age_years)
}

pub fn is_age_token(tok: TokenId) -> bool {
    (AGE_BASE..AGE_BASE + MAX_AGE + 1).contains(&tok)
}

/// "photo of a person"
pub fn generic_prompt() -> Vec<TokenId> {
    vec![TOK_PHOTO, TOK_OF, TOK_A, TOK_PERSON]
}

/// "photo of a person, oversaturated, blurry, cartoonish, malformed"
pub fn generic_prompt_with_negatives() -> Vec<TokenId> {
    let mut p = generic_prompt();
    p.extend_from_slice(&[
        TOK_OVERSATURATED,
        TOK_BLURRY,
        TOK_CARTOONISH,
        TOK_MALFORMED,
    ]);
    p
}

/// "photo of a [age]-year-old person"; the age is rounded to the nearest
/// integer carried by the vocabulary.
pub fn age_prompt(age_years: f64) -> Result<Vec<TokenId>> {
    if !(0.0..=MAX_AGE as f64).contains(&age_years) {
        return Err(Error::InvalidRange(format!(
            "age {age_years} outside [0, {MAX_AGE}]"
        )));
    }
    let rounded = age_years.round() as usize;
    Ok(vec![
        TOK_PHOTO,
        TOK_OF,
        TOK_A,
        age_token(rounded)?,
        TOK_YEAR_OLD,
        TOK_PERSON,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_prompt_rounds_and_bounds() {
        let p24 = age_prompt(24.0).unwrap();
        assert!(p24.contains(&age_token(24).unwrap()));
        assert_eq!(age_prompt(24.4).unwrap(), p24);
        assert!(age_prompt(-1.0).is_err());
        assert!(age_prompt(100.6).is_err());
        assert_eq!(age_prompt(100.0).unwrap()[3], age_token(100).unwrap());
    }

    #[test]
    fn vocab_ids_disjoint() {
        assert!(VOCAB_SIZE == 110);
        assert!(!is_age_token(TOK_PERSON));
        assert!(is_age_token(age_token(0).unwrap()));
        assert!(is_age_token(age_token(100).unwrap()));
    }
}
