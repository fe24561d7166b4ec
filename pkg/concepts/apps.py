from django.apps import AppConfig


class ConceptsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'concepts'
    verbose_name = 'Concept reasoning'
