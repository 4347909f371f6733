//! C ABI bindings (under construction)
