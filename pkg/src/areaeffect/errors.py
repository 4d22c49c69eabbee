"""Exception hierarchy. Every error carries a short machine-readable kind tag."""


class AreaEffectError(Exception):
    kind = "error"


class DataError(AreaEffectError):
    kind = "data"


class ConfigError(AreaEffectError):
    kind = "config"


class SingularDesignError(AreaEffectError):
    kind = "singular-design"


class SeparationError(AreaEffectError):
    kind = "separation"


class SchemaMismatchError(AreaEffectError):
    kind = "schema-mismatch"


class FitError(AreaEffectError):
    kind = "fit"
