pub mod instances;
pub mod oracle;
