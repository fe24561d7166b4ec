"""
URL configuration for the reasoner project.

Only the admin is routed; it browses the training and evaluation registry.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
